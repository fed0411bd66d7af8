//! The CNN-LSTM policy network, the policy/target pair, and checkpoints.
//!
//! Each MFCC frame is one LSTM timestep. Within a frame the coefficients form
//! a one-channel sequence that goes through two same-padded convolutions and
//! a max pool (the time-distributed front end); the pooled maps are flattened
//! per frame and fed to the LSTM. The last hidden state passes through
//! dropout, three ReLU dense layers and a linear head with softmax.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rlkws_nn::{argmax, init, Graph, NnError, NodeId, Scalar, Tensor};
use thiserror::Error;

use crate::features::FeatureMatrix;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("state is {found_mfcc}x{found_frames}, model expects {n_mfcc}x{n_frames}")]
    StateShape {
        n_mfcc: usize,
        n_frames: usize,
        found_mfcc: usize,
        found_frames: usize,
    },
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error("tensor '{name}' has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("checkpoint {path}: unsupported version {version}")]
    Version { path: PathBuf, version: u8 },
    #[error("checkpoint {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Layer sizes. Together with the input shape this fixes every tensor shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub n_mfcc: usize,
    pub n_frames: usize,
    pub num_classes: usize,
    pub conv_filters: [usize; 2],
    pub kernel_size: usize,
    pub pool: usize,
    pub lstm_hidden: usize,
    pub dense: Vec<usize>,
    pub dropout: f64,
    /// Fixed multiplier applied to raw MFCC values before the first layer.
    pub input_scale: f64,
}

impl Architecture {
    pub fn new(n_mfcc: usize, n_frames: usize, num_classes: usize) -> Self {
        Self {
            n_mfcc,
            n_frames,
            num_classes,
            conv_filters: [16, 8],
            kernel_size: 3,
            pool: 2,
            lstm_hidden: 50,
            dense: vec![512, 256, 64],
            dropout: 0.3,
            input_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Arch(m.to_string()));
        if self.n_mfcc == 0 || self.n_frames == 0 || self.num_classes < 2 {
            return bad("need n_mfcc >= 1, n_frames >= 1 and at least two classes");
        }
        if self.kernel_size.is_multiple_of(2) {
            return bad("kernel size must be odd");
        }
        if self.pool == 0 || self.pool > self.n_mfcc {
            return bad("pool window must be in 1..=n_mfcc");
        }
        if self.conv_filters.contains(&0) || self.lstm_hidden == 0 || self.dense.contains(&0) {
            return bad("layer sizes must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        Ok(())
    }

    /// Features per LSTM timestep after pooling and flattening.
    pub fn lstm_input(&self) -> usize {
        (self.n_mfcc / self.pool) * self.conv_filters[1]
    }

    /// `(name, shape)` of every trainable tensor, in storage order.
    pub fn tensor_specs(&self) -> Vec<(String, Vec<usize>)> {
        let [c1, c2] = self.conv_filters;
        let (k, h) = (self.kernel_size, self.lstm_hidden);
        let mut v = vec![
            ("conv1.kernel".to_string(), vec![k, 1, c1]),
            ("conv1.bias".to_string(), vec![c1]),
            ("conv2.kernel".to_string(), vec![k, c1, c2]),
            ("conv2.bias".to_string(), vec![c2]),
            ("lstm.w".to_string(), vec![4 * h, self.lstm_input()]),
            ("lstm.u".to_string(), vec![4 * h, h]),
            ("lstm.b".to_string(), vec![4 * h]),
        ];
        let mut prev = h;
        for (i, &d) in self.dense.iter().enumerate() {
            v.push((format!("dense{}.weight", i + 1), vec![d, prev]));
            v.push((format!("dense{}.bias", i + 1), vec![d]));
            prev = d;
        }
        v.push(("head.weight".to_string(), vec![self.num_classes, prev]));
        v.push(("head.bias".to_string(), vec![self.num_classes]));
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.tensor_specs()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    fn header_line(&self) -> String {
        let dense: Vec<String> = self.dense.iter().map(|d| d.to_string()).collect();
        format!(
            "arch n_mfcc={} n_frames={} classes={} conv={},{} kernel={} pool={} lstm={} dense={} dropout={} input_scale={}",
            self.n_mfcc,
            self.n_frames,
            self.num_classes,
            self.conv_filters[0],
            self.conv_filters[1],
            self.kernel_size,
            self.pool,
            self.lstm_hidden,
            dense.join(","),
            self.dropout,
            self.input_scale
        )
    }

    fn parse_header_line(line: &str) -> Option<Self> {
        let mut fields = line.strip_prefix("arch ")?.split(' ');
        let mut next = |key: &str| -> Option<String> {
            let (k, v) = fields.next()?.split_once('=')?;
            (k == key).then(|| v.to_string())
        };
        let n_mfcc = next("n_mfcc")?.parse().ok()?;
        let n_frames = next("n_frames")?.parse().ok()?;
        let num_classes = next("classes")?.parse().ok()?;
        let conv = next("conv")?;
        let (c1, c2) = conv.split_once(',')?;
        let kernel_size = next("kernel")?.parse().ok()?;
        let pool = next("pool")?.parse().ok()?;
        let lstm_hidden = next("lstm")?.parse().ok()?;
        let dense = next("dense")?
            .split(',')
            .map(|d| d.parse().ok())
            .collect::<Option<Vec<usize>>>()?;
        let dropout = next("dropout")?.parse().ok()?;
        let input_scale = next("input_scale")?.parse().ok()?;
        Some(Self {
            n_mfcc,
            n_frames,
            num_classes,
            conv_filters: [c1.parse().ok()?, c2.parse().ok()?],
            kernel_size,
            pool,
            lstm_hidden,
            dense,
            dropout,
            input_scale,
        })
    }
}

/// All trainable tensors of one network, ordered as
/// [`Architecture::tensor_specs`].
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams<T: Scalar = f32> {
    arch: Architecture,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> PolicyParams<T> {
    /// Glorot-uniform weights, zero biases, LSTM forget-gate bias 1.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let tensors = arch
            .tensor_specs()
            .into_iter()
            .map(|(name, shape)| {
                if name == "lstm.b" {
                    init::lstm_bias(arch.lstm_hidden)
                } else if name.ends_with("bias") {
                    Tensor::zeros(&shape)
                } else if name.starts_with("conv") {
                    let (k, cin, cout) = (shape[0], shape[1], shape[2]);
                    init::glorot_uniform(&shape, k * cin, k * cout, rng)
                } else {
                    init::glorot_uniform(&shape, shape[1], shape[0], rng)
                }
            })
            .collect();
        Ok(Self { arch, tensors })
    }

    pub fn from_tensors(arch: Architecture, tensors: Vec<Tensor<T>>) -> Result<Self> {
        arch.validate()?;
        let specs = arch.tensor_specs();
        if specs.len() != tensors.len() {
            return Err(ModelError::Arch(format!(
                "expected {} tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in specs.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(ModelError::TensorShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        Ok(Self { arch, tensors })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn zeros_like(&self) -> Vec<Tensor<T>> {
        self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect()
    }

    pub fn cast<U: Scalar>(&self) -> PolicyParams<U> {
        PolicyParams {
            arch: self.arch.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    /// Checks that these parameters fit `expected`, naming the first tensor
    /// whose shape differs.
    pub fn ensure_compatible(&self, expected: &Architecture) -> Result<()> {
        for ((name, shape), t) in expected.tensor_specs().iter().zip(&self.tensors) {
            if t.shape() != shape.as_slice() {
                return Err(ModelError::TensorShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        let (a, b) = (expected.tensor_specs().len(), self.tensors.len());
        if a != b {
            return Err(ModelError::Arch(format!("expected {a} tensors, found {b}")));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }
}

fn check_state(arch: &Architecture, state: &FeatureMatrix) -> Result<()> {
    if state.n_mfcc() != arch.n_mfcc || state.n_frames() != arch.n_frames {
        return Err(ModelError::StateShape {
            n_mfcc: arch.n_mfcc,
            n_frames: arch.n_frames,
            found_mfcc: state.n_mfcc(),
            found_frames: state.n_frames(),
        });
    }
    Ok(())
}

/// Records the policy network on `graph` and returns the probability node.
///
/// `graph` must borrow `params.tensors()`.
pub fn build<T: Scalar, R: Rng + ?Sized>(
    graph: &mut Graph<'_, T>,
    arch: &Architecture,
    state: &FeatureMatrix,
    training: bool,
    rng: &mut R,
) -> Result<NodeId> {
    check_state(arch, state)?;
    let (nf, nm) = (arch.n_frames, arch.n_mfcc);
    let scale = arch.input_scale;
    let x: Vec<T> = state
        .transposed()
        .into_iter()
        .map(|v| T::of(v as f64 * scale))
        .collect();
    let x = graph.input(Tensor::new(vec![nf, nm, 1], x)?);
    let p: Vec<NodeId> = (0..arch.tensor_specs().len())
        .map(|i| graph.param(i))
        .collect::<std::result::Result<_, _>>()?;

    let h = graph.conv1d(x, p[0], p[1])?;
    let h = graph.relu(h);
    let h = graph.conv1d(h, p[2], p[3])?;
    let h = graph.relu(h);
    let h = graph.maxpool1d(h, arch.pool)?;
    let h = graph.reshape(h, &[nf, arch.lstm_input()])?;
    let mut h = graph.lstm(h, p[4], p[5], p[6])?;
    h = graph.dropout(h, arch.dropout, training, rng)?;
    let mut next = 7;
    for _ in &arch.dense {
        h = graph.dense(h, p[next], p[next + 1])?;
        h = graph.relu(h);
        next += 2;
    }
    let logits = graph.dense(h, p[next], p[next + 1])?;
    Ok(graph.softmax(logits))
}

/// Action probabilities for one state.
pub fn forward<T: Scalar, R: Rng + ?Sized>(
    params: &PolicyParams<T>,
    state: &FeatureMatrix,
    training: bool,
    rng: &mut R,
) -> Result<Vec<T>> {
    let mut g = Graph::new(&params.tensors);
    let out = build(&mut g, &params.arch, state, training, rng)?;
    Ok(g.value(out).data().to_vec())
}

/// Inference-mode forward (no dropout, so no randomness is consumed).
pub fn predict<T: Scalar>(params: &PolicyParams<T>, state: &FeatureMatrix) -> Result<Vec<T>> {
    forward(params, state, false, &mut NoRng)
}

/// Greedy action: the most probable class, lowest index on ties.
pub fn act<T: Scalar>(params: &PolicyParams<T>, state: &FeatureMatrix) -> Result<usize> {
    Ok(argmax(&predict(params, state)?))
}

/// Random source for inference paths; inference never draws.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("inference does not sample")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("inference does not sample")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("inference does not sample")
    }
}

/// The trained policy and its periodically synchronised target copy. Generic
/// over the parameter container; the networks use [`PolicyParams`].
#[derive(Debug, Clone)]
pub struct ModelPair<P: Clone = PolicyParams<f32>> {
    pub policy: P,
    target: P,
    syncs: usize,
}

impl<P: Clone> ModelPair<P> {
    pub fn new(policy: P) -> Self {
        Self {
            target: policy.clone(),
            policy,
            syncs: 0,
        }
    }

    /// Read-only: the target only changes through [`ModelPair::sync_target`].
    pub fn target(&self) -> &P {
        &self.target
    }

    pub fn sync_target(&mut self) {
        self.target.clone_from(&self.policy);
        self.syncs += 1;
    }

    pub fn sync_count(&self) -> usize {
        self.syncs
    }
}

const MAGIC: &[u8; 6] = b"NNCKPT";
const VERSION: u8 = 1;

/// Serialises parameters: magic, version byte, little-endian `u32` header
/// length, a text header (architecture line, then `tensor <name> <shape>
/// <offset>` lines), then the `f32` little-endian payload.
pub fn encode_checkpoint(params: &PolicyParams<f32>) -> Vec<u8> {
    let mut header = params.arch.header_line();
    header.push('\n');
    let mut offset = 0usize;
    for ((name, _), t) in params.arch.tensor_specs().iter().zip(&params.tensors) {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(header, "tensor {name} {} {offset}", dims.join("x"));
        offset += 4 * t.len();
    }
    let mut out = Vec::with_capacity(11 + header.len() + offset);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for t in &params.tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<PolicyParams<f32>> {
    let fmt = |reason: &str| ModelError::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 11 || &bytes[..6] != MAGIC {
        return Err(fmt("bad magic bytes"));
    }
    if bytes[6] != VERSION {
        return Err(ModelError::Version {
            path: path.to_path_buf(),
            version: bytes[6],
        });
    }
    let header_len = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
    let header = bytes
        .get(11..11 + header_len)
        .ok_or_else(|| fmt("truncated header"))?;
    let header = std::str::from_utf8(header).map_err(|_| fmt("header is not UTF-8"))?;
    let payload = &bytes[11 + header_len..];
    let mut lines = header.lines();
    let arch = lines
        .next()
        .and_then(Architecture::parse_header_line)
        .ok_or_else(|| fmt("missing or malformed architecture line"))?;
    let mut tensors = Vec::new();
    let mut end = 0usize;
    for line in lines {
        let parts: Vec<&str> = line.split(' ').collect();
        let [kind, _name, dims, offset] = parts[..] else {
            return Err(fmt("malformed tensor line"));
        };
        if kind != "tensor" {
            return Err(fmt("malformed tensor line"));
        }
        let shape = dims
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| fmt("malformed tensor shape"))?;
        let offset: usize = offset.parse().map_err(|_| fmt("malformed tensor offset"))?;
        let n: usize = shape.iter().product();
        let raw = payload
            .get(offset..offset + 4 * n)
            .ok_or_else(|| fmt("truncated payload"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::new(shape, data)?);
        end = end.max(offset + 4 * n);
    }
    if end != payload.len() {
        return Err(fmt("payload length does not match header"));
    }
    PolicyParams::from_tensors(arch, tensors)
}

/// Writes atomically (temp file + rename) so an interrupted save never leaves
/// a corrupt checkpoint behind.
pub fn save_checkpoint(params: &PolicyParams<f32>, path: &Path) -> Result<()> {
    crate::features::write_atomic(path, &encode_checkpoint(params)).map_err(|e| match e {
        crate::features::FeatureError::Cache { path, source } => ModelError::Io { path, source },
        other => ModelError::Format {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyParams<f32>> {
    let bytes = fs::read(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes, path)
}

/// Loads a checkpoint and verifies it matches `arch` tensor by tensor.
pub fn load_checkpoint_for(path: &Path, arch: &Architecture) -> Result<PolicyParams<f32>> {
    let params = load_checkpoint(path)?;
    params.ensure_compatible(arch)?;
    Ok(params)
}
