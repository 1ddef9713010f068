//! The recurrent learned optimizer: a small feed-forward relu network mapping
//! `(y_t, x_{t-1})` to the raw prediction `x_tilde_t`, with hand-written
//! forward and reverse passes so gradients can be checked against finite
//! differences exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::Mat;

#[derive(Debug, Clone, PartialEq)]
pub struct NetArchitecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
}

impl NetArchitecture {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden.contains(&0) {
            return Err(Error::InvalidParameter(
                "layer widths must be at least 1".into(),
            ));
        }
        Ok(NetArchitecture {
            input_dim,
            hidden,
            output_dim,
        })
    }

    /// Three hidden layers of ten relu units each.
    pub fn default_for(context_dim: usize, action_dim: usize) -> Self {
        NetArchitecture {
            input_dim: context_dim + action_dim,
            hidden: vec![10, 10, 10],
            output_dim: action_dim,
        }
    }

    /// (fan_in, fan_out) per affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for w in &self.hidden {
            dims.push((prev, *w));
            prev = *w;
        }
        dims.push((prev, self.output_dim));
        dims
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// out x in, row major.
    pub weights: Mat,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyWeights {
    pub arch: NetArchitecture,
    pub seed: u64,
    pub layers: Vec<Layer>,
}

/// He-scaled initialization: weight std `sqrt(2 / fan_in)`, zero biases.
/// Deterministic for a given seed.
pub fn init_weights(arch: &NetArchitecture, seed: u64) -> PolicyWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    for (fan_in, fan_out) in arch.layer_dims() {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let mut w = Mat::zeros(fan_out, fan_in);
        for v in w.data_mut() {
            *v = normal.sample(&mut rng);
        }
        layers.push(Layer {
            weights: w,
            bias: vec![0.0; fan_out],
        });
    }
    PolicyWeights {
        arch: arch.clone(),
        seed,
        layers,
    }
}

/// Intermediate state of one forward pass, kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    pub input: Vec<f64>,
    /// Pre-activation of every layer including the output layer.
    pub pre_activations: Vec<Vec<f64>>,
    /// Post-activation of every hidden layer.
    pub activations: Vec<Vec<f64>>,
    context_dim: usize,
}

/// `x_tilde = h_W(y, x_prev)`. Affine + relu stack with a linear output layer.
pub fn forward(
    weights: &PolicyWeights,
    y: &[f64],
    x_prev: &[f64],
) -> Result<(Vec<f64>, ForwardTape)> {
    let arch = &weights.arch;
    if y.len() + x_prev.len() != arch.input_dim {
        return Err(Error::DimensionMismatch {
            context: "net input",
            expected: arch.input_dim,
            actual: y.len() + x_prev.len(),
        });
    }
    let mut input = Vec::with_capacity(arch.input_dim);
    input.extend_from_slice(y);
    input.extend_from_slice(x_prev);

    let n_layers = weights.layers.len();
    let mut pre_activations = Vec::with_capacity(n_layers);
    let mut activations = Vec::with_capacity(n_layers.saturating_sub(1));
    let mut cur = input.clone();
    for (l, layer) in weights.layers.iter().enumerate() {
        let mut z = layer.weights.mul_vec(&cur);
        for (zi, b) in z.iter_mut().zip(&layer.bias) {
            *zi += b;
        }
        pre_activations.push(z.clone());
        if l + 1 < n_layers {
            // relu; the subgradient at exactly 0 is taken as 0
            for v in z.iter_mut() {
                if *v <= 0.0 {
                    *v = 0.0;
                }
            }
            activations.push(z.clone());
            cur = z;
        } else {
            cur = z;
        }
    }
    if !cur.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            what: "net output".into(),
        });
    }
    Ok((
        cur,
        ForwardTape {
            input,
            pre_activations,
            activations,
            context_dim: y.len(),
        },
    ))
}

/// Per-layer gradients, same shapes as the weights.
#[derive(Debug, Clone)]
pub struct NetGradients {
    pub layers: Vec<Layer>,
}

impl NetGradients {
    pub fn zeros(arch: &NetArchitecture) -> Self {
        NetGradients {
            layers: arch
                .layer_dims()
                .iter()
                .map(|(fan_in, fan_out)| Layer {
                    weights: Mat::zeros(*fan_out, *fan_in),
                    bias: vec![0.0; *fan_out],
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &NetGradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.data_mut().iter_mut().zip(b.weights.data()) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for layer in &mut self.layers {
            for v in layer.weights.data_mut() {
                *v *= s;
            }
            for v in &mut layer.bias {
                *v *= s;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for layer in &self.layers {
            for v in layer.weights.data() {
                worst = worst.max(v.abs());
            }
            for v in &layer.bias {
                worst = worst.max(v.abs());
            }
        }
        worst
    }
}

/// Reverse pass for `<grad_out, x_tilde>`: gradients with respect to all
/// weights and both inputs.
pub fn backward(
    weights: &PolicyWeights,
    tape: &ForwardTape,
    grad_out: &[f64],
) -> (NetGradients, Vec<f64>, Vec<f64>) {
    let n_layers = weights.layers.len();
    assert_eq!(grad_out.len(), weights.arch.output_dim);

    let mut grads = NetGradients::zeros(&weights.arch);
    let mut delta = grad_out.to_vec();
    for l in (0..n_layers).rev() {
        let upstream = if l == 0 {
            &tape.input
        } else {
            &tape.activations[l - 1]
        };
        // dL/dW = delta * upstream^T, dL/db = delta
        let gw = grads.layers[l].weights.data_mut();
        let cols = upstream.len();
        for (r, d) in delta.iter().enumerate() {
            for (c, u) in upstream.iter().enumerate() {
                gw[r * cols + c] += d * u;
            }
        }
        for (gb, d) in grads.layers[l].bias.iter_mut().zip(&delta) {
            *gb += d;
        }
        let mut next = weights.layers[l].weights.tr_mul_vec(&delta);
        if l > 0 {
            for (v, z) in next.iter_mut().zip(&tape.pre_activations[l - 1]) {
                if *z <= 0.0 {
                    *v = 0.0;
                }
            }
        }
        delta = next;
    }
    let grad_y = delta[..tape.context_dim].to_vec();
    let grad_x_prev = delta[tape.context_dim..].to_vec();
    (grads, grad_x_prev, grad_y)
}

const WEIGHTS_MAGIC: &str = "soco-weights v1";

impl PolicyWeights {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "{WEIGHTS_MAGIC}")?;
        writeln!(w, "input_dim {}", self.arch.input_dim)?;
        write!(w, "hidden")?;
        for h in &self.arch.hidden {
            write!(w, " {h}")?;
        }
        writeln!(w)?;
        writeln!(w, "output_dim {}", self.arch.output_dim)?;
        writeln!(w, "seed {}", self.seed)?;
        for (i, layer) in self.layers.iter().enumerate() {
            writeln!(
                w,
                "layer {i} rows {} cols {}",
                layer.weights.rows(),
                layer.weights.cols()
            )?;
            for r in 0..layer.weights.rows() {
                write!(w, "w")?;
                for c in 0..layer.weights.cols() {
                    write!(w, " {}", layer.weights.get(r, c))?;
                }
                writeln!(w)?;
            }
            write!(w, "b")?;
            for b in &layer.bias {
                write!(w, " {b}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let mut lines = BufReader::new(file).lines();
        let bad = |msg: &str| Error::WeightsFormat {
            path: path.to_path_buf(),
            message: msg.to_string(),
        };
        let mut next_line = || -> Result<String> {
            lines
                .next()
                .transpose()?
                .ok_or_else(|| bad("unexpected end of file"))
        };

        if next_line()? != WEIGHTS_MAGIC {
            return Err(bad("missing magic header"));
        }
        let input_dim = parse_kv(&next_line()?, "input_dim").map_err(|m| bad(&m))?;
        let hidden_line = next_line()?;
        let hidden: Vec<usize> = {
            let mut it = hidden_line.split_whitespace();
            if it.next() != Some("hidden") {
                return Err(bad("expected hidden line"));
            }
            it.map(|tok| tok.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("bad hidden widths"))?
        };
        let output_dim = parse_kv(&next_line()?, "output_dim").map_err(|m| bad(&m))?;
        let seed: u64 = {
            let line = next_line()?;
            let mut it = line.split_whitespace();
            if it.next() != Some("seed") {
                return Err(bad("expected seed line"));
            }
            it.next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| bad("bad seed"))?
        };
        let arch = NetArchitecture::new(input_dim, hidden, output_dim)
            .map_err(|e| bad(&e.to_string()))?;

        let mut layers = Vec::new();
        for (i, (fan_in, fan_out)) in arch.layer_dims().iter().enumerate() {
            let header = next_line()?;
            let expect = format!("layer {i} rows {fan_out} cols {fan_in}");
            if header != expect {
                return Err(bad(&format!("expected {expect:?}, got {header:?}")));
            }
            let mut w = Mat::zeros(*fan_out, *fan_in);
            for r in 0..*fan_out {
                let row = next_line()?;
                let mut it = row.split_whitespace();
                if it.next() != Some("w") {
                    return Err(bad("expected weight row"));
                }
                for c in 0..*fan_in {
                    let v: f64 = it
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| bad("bad weight value"))?;
                    w.set(r, c, v);
                }
            }
            let brow = next_line()?;
            let mut it = brow.split_whitespace();
            if it.next() != Some("b") {
                return Err(bad("expected bias row"));
            }
            let mut bias = Vec::with_capacity(*fan_out);
            for _ in 0..*fan_out {
                bias.push(
                    it.next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| bad("bad bias value"))?,
                );
            }
            layers.push(Layer { weights: w, bias });
        }
        Ok(PolicyWeights { arch, seed, layers })
    }
}

fn parse_kv(line: &str, key: &str) -> std::result::Result<usize, String> {
    let mut it = line.split_whitespace();
    if it.next() != Some(key) {
        return Err(format!("expected {key} line, got {line:?}"));
    }
    it.next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| format!("bad {key} value"))
}
