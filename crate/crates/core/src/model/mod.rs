//! Transporter network.
//!
//! Two stride-4 convolutional trunks see the same [`FeatureStack`]: the
//! encoder produces a feature map Φ, the KeyNet trunk produces `k` logit maps
//! whose spatial soft-argmax gives keypoints rendered as Gaussian heatmaps.
//! Source features are transported into target keypoint regions and the
//! RefineNet decoder reconstructs the target stack.

mod checkpoint;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::{FeatureStack, Frame, Preprocess};
use crate::tensor::{xavier_uniform, Graph, Params, Scalar, Tensor, Var};
use crate::trace::{note, Trace};

pub use checkpoint::{Checkpoint, MODEL_HEADER, PIPELINE_HEADER};

const NORM_EPS: f64 = 1e-5;
const SPATIAL_KERNEL: usize = 7;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub k: usize,
    pub input_channels: usize,
    pub input_size: usize,
    /// Total downsampling of both trunks; fixed at 4 by the two stride-2
    /// stages.
    pub feature_stride: usize,
    /// Gaussian std of rendered heatmaps, in feature-grid cells.
    pub heatmap_sigma: f64,
    pub cbam_enabled: bool,
    /// Output channels of the two trunk stages.
    pub channels: [usize; 2],
    /// Channel-attention bottleneck ratio.
    pub cbam_reduction: usize,
    /// Transport branch that receives no gradient.
    pub stop_side: StopSide,
}

/// Which side of a transported pair is treated as constant.
///
/// `Target` freezes Φt and Ht, so the keypoint net learns only from the
/// source heatmap erasing features. `Source` freezes Φs and Hs instead and
/// the keypoint net learns from the target heatmap pasting features, which
/// pulls keypoints onto moving structure.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StopSide {
    #[default]
    Target,
    Source,
}

impl std::fmt::Display for StopSide {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Target => "target",
            Self::Source => "source",
        })
    }
}

impl std::str::FromStr for StopSide {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "target" => Ok(Self::Target),
            "source" => Ok(Self::Source),
            _ => Err(format!("expected target or source, got {s:?}")),
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k: 10,
            input_channels: 10,
            input_size: 256,
            feature_stride: 4,
            heatmap_sigma: 1.5,
            cbam_enabled: false,
            channels: [32, 64],
            cbam_reduction: 8,
            stop_side: StopSide::Target,
        }
    }
}

impl ModelConfig {
    /// 64×64 input variant for CPU-scale runs.
    pub fn desk() -> Self {
        Self {
            input_size: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("k must be >= 1"));
        }
        if self.input_channels == 0 {
            return Err(Error::invalid("input_channels must be >= 1"));
        }
        if self.feature_stride != 4 {
            return Err(Error::invalid(format!(
                "feature_stride must be 4 (two stride-2 stages), got {}",
                self.feature_stride
            )));
        }
        if self.input_size < 8 || self.input_size % self.feature_stride != 0 {
            return Err(Error::invalid(format!(
                "input_size must be a multiple of {} and >= 8, got {}",
                self.feature_stride, self.input_size
            )));
        }
        if !(self.heatmap_sigma > 0.0 && self.heatmap_sigma.is_finite()) {
            return Err(Error::invalid(format!(
                "heatmap_sigma must be > 0, got {}",
                self.heatmap_sigma
            )));
        }
        if self.channels.contains(&0) || self.cbam_reduction == 0 {
            return Err(Error::invalid("channel counts and cbam_reduction must be >= 1"));
        }
        Ok(())
    }

    pub fn feature_size(&self) -> usize {
        self.input_size / self.feature_stride
    }

    pub fn feature_channels(&self) -> usize {
        self.channels[1]
    }

    fn cbam_hidden(&self, c: usize) -> usize {
        (c / self.cbam_reduction).max(1)
    }

    fn conv_shapes(out: &mut Vec<(String, Vec<usize>)>, name: &str, o: usize, i: usize, k: usize) {
        out.push((format!("{name}.w"), vec![o, i, k, k]));
        out.push((format!("{name}.b"), vec![o]));
    }

    fn cbam_shapes(&self, out: &mut Vec<(String, Vec<usize>)>, name: &str, c: usize) {
        let h = self.cbam_hidden(c);
        out.push((format!("{name}.mlp1.w"), vec![h, c]));
        out.push((format!("{name}.mlp1.b"), vec![h, 1]));
        out.push((format!("{name}.mlp2.w"), vec![c, h]));
        out.push((format!("{name}.mlp2.b"), vec![c, 1]));
        Self::conv_shapes(out, &format!("{name}.spatial"), 1, 2, SPATIAL_KERNEL);
    }

    fn decoder_shapes(&self, out: &mut Vec<(String, Vec<usize>)>, prefix: &str) {
        let [c1, c2] = self.channels;
        Self::conv_shapes(out, &format!("{prefix}.conv1"), c1, c2, 3);
        Self::conv_shapes(out, &format!("{prefix}.conv2"), self.input_channels, c1, 3);
    }

    /// Names and shapes of every trainable tensor, in initialization order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let [c1, c2] = self.channels;
        let mut out = Vec::new();
        for trunk in ["encoder", "keynet"] {
            Self::conv_shapes(&mut out, &format!("{trunk}.conv1"), c1, self.input_channels, 3);
            Self::conv_shapes(&mut out, &format!("{trunk}.conv2"), c2, c1, 3);
            if self.cbam_enabled {
                self.cbam_shapes(&mut out, &format!("{trunk}.cbam1"), c1);
                self.cbam_shapes(&mut out, &format!("{trunk}.cbam2"), c2);
            }
        }
        Self::conv_shapes(&mut out, "keynet.head", self.k, c2, 1);
        self.decoder_shapes(&mut out, "refine");
        out
    }

    /// Mirror decoder used only while pretraining the encoder.
    pub fn pretrain_decoder_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.decoder_shapes(&mut out, "decoder");
        out
    }

    fn init(shapes: &[(String, Vec<usize>)], seed: u64) -> Params<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        for (name, shape) in shapes {
            let t = if name.ends_with(".b") {
                Tensor::zeros(shape)
            } else if shape.len() == 4 {
                let rf = shape[2] * shape[3];
                xavier_uniform(shape, shape[1] * rf, shape[0] * rf, &mut rng)
            } else {
                xavier_uniform(shape, shape[1], shape[0], &mut rng)
            };
            p.insert(name.clone(), t);
        }
        p
    }

    pub fn init_params(&self, seed: u64) -> Params<f32> {
        Self::init(&self.param_shapes(), seed)
    }

    pub fn init_pretrain_decoder(&self, seed: u64) -> Params<f32> {
        Self::init(&self.pretrain_decoder_shapes(), seed)
    }

    /// Every expected tensor is present with the expected shape.
    pub fn check_params<T: Scalar>(&self, params: &Params<T>) -> Result<()> {
        for (name, shape) in self.param_shapes() {
            let t = params
                .get(&name)
                .ok_or_else(|| Error::invalid(format!("parameter set lacks {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::invalid(format!(
                    "parameter {name} has shape {:?} but the model config expects {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }

    /// Image-pixel coordinate of feature cell `cell` (cell centre convention).
    pub fn cell_to_pixel(&self, cell: f64) -> f64 {
        let s = self.feature_stride as f64;
        s * cell + s / 2.0
    }
}

/// Normalized `[-1, 1]` coordinate of each of `n` grid cells.
pub fn grid(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect()
}

/// Normalized coordinate back to a (fractional) cell index.
pub fn normalized_to_cell(v: f64, n: usize) -> f64 {
    (v + 1.0) / 2.0 * (n.max(1) - 1) as f64
}

/// Keypoints on a graph. `rows`/`cols` are `k×1×1` normalized coordinates.
#[derive(Clone, Copy, Debug)]
pub struct KeypointVars<'g, T: Scalar> {
    pub rows: Var<'g, T>,
    pub cols: Var<'g, T>,
    pub heatmaps: Var<'g, T>,
    pub combined: Var<'g, T>,
}

/// Detached keypoints.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSet<T: Scalar = f32> {
    /// `(row, col)` per slot, normalized to `[-1, 1]` on the feature grid.
    pub coords: Vec<[f64; 2]>,
    pub heatmaps: Tensor<T>,
    pub combined: Tensor<T>,
}

impl<T: Scalar> KeypointVars<'_, T> {
    pub fn detach(&self) -> KeypointSet<T> {
        let (r, c) = (self.rows.value(), self.cols.value());
        KeypointSet {
            coords: r
                .data()
                .iter()
                .zip(c.data())
                .map(|(a, b)| [a.as_f64(), b.as_f64()])
                .collect(),
            heatmaps: (*self.heatmaps.value()).clone(),
            combined: (*self.combined.value()).clone(),
        }
    }
}

fn constant<'g, T: Scalar>(g: &'g Graph<T>, shape: &[usize], v: &[f64]) -> Result<Var<'g, T>> {
    Ok(g.constant(Tensor::new(shape, v.iter().map(|&x| T::of(x)).collect())?))
}

/// Gaussian heatmaps `exp(-(Δr² + Δc²) / 2σ²)` (Δ in cells) for
/// `k×1×1` normalized coordinates on an `h×w` grid, plus their clamped sum.
pub fn render_heatmaps<'g, T: Scalar>(
    rows: Var<'g, T>,
    cols: Var<'g, T>,
    h: usize,
    w: usize,
    sigma: f64,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let g = rows.graph();
    let gr = constant(g, &[1, h, 1], &grid(h))?;
    let gc = constant(g, &[1, 1, w], &grid(w))?;
    // normalized units to cells: (n-1)/2 per unit
    let sr = (h.max(2) - 1) as f64 / 2.0;
    let sc = (w.max(2) - 1) as f64 / 2.0;
    let two_var = 2.0 * sigma * sigma;
    let dr = gr.sub(rows)?.square()?.scale(T::of(-sr * sr / two_var));
    let dc = gc.sub(cols)?.square()?.scale(T::of(-sc * sc / two_var));
    let heatmaps = dr.add(dc)?.exp();
    let combined = heatmaps.sum_axes(&[0])?.clamp(T::zero(), T::one());
    Ok((heatmaps, combined))
}

/// Spatial soft-argmax of `k×h×w` logits followed by heatmap rendering.
pub fn keypoints_from_logits<'g, T: Scalar>(logits: Var<'g, T>, sigma: f64) -> Result<KeypointVars<'g, T>> {
    let shape = logits.shape();
    if shape.len() != 3 {
        return Err(Error::shape("keypoints", &shape, &[0, 0, 0]));
    }
    let (k, h, w) = (shape[0], shape[1], shape[2]);
    let g = logits.graph();
    let p = logits.spatial_softmax()?.reshape(&[k, h * w])?;
    let (gr, gc) = (grid(h), grid(w));
    let row_w: Vec<f64> = (0..h * w).map(|i| gr[i / w]).collect();
    let col_w: Vec<f64> = (0..h * w).map(|i| gc[i % w]).collect();
    let rows = p.matmul(constant(g, &[h * w, 1], &row_w)?)?.reshape(&[k, 1, 1])?;
    let cols = p.matmul(constant(g, &[h * w, 1], &col_w)?)?.reshape(&[k, 1, 1])?;
    let (heatmaps, combined) = render_heatmaps(rows, cols, h, w, sigma)?;
    Ok(KeypointVars {
        rows,
        cols,
        heatmaps,
        combined,
    })
}

/// `(1 - Hs)(1 - Ht) Φs + Ht Φt`, with the target branch held constant.
pub fn transport<'g, T: Scalar>(
    phi_s: Var<'g, T>,
    phi_t: Var<'g, T>,
    h_s: Var<'g, T>,
    h_t: Var<'g, T>,
) -> Result<Var<'g, T>> {
    transport_stopping(phi_s, phi_t, h_s, h_t, StopSide::Target)
}

/// [`transport`] with a choice of which branch is held constant.
pub fn transport_stopping<'g, T: Scalar>(
    phi_s: Var<'g, T>,
    phi_t: Var<'g, T>,
    h_s: Var<'g, T>,
    h_t: Var<'g, T>,
    stop: StopSide,
) -> Result<Var<'g, T>> {
    let (ps, pt) = (phi_s.shape(), phi_t.shape());
    if ps != pt || ps.len() != 3 {
        return Err(Error::shape("transport", &ps, &pt));
    }
    for h in [h_s, h_t] {
        let hs = h.shape();
        if hs.len() != 3 || hs[0] != 1 || hs[1..] != ps[1..] {
            return Err(Error::shape("transport", &ps, &hs));
        }
    }
    let (phi_s, h_s, phi_t, h_t) = match stop {
        StopSide::Target => (phi_s, h_s, phi_t.stop_gradient(), h_t.stop_gradient()),
        StopSide::Source => (phi_s.stop_gradient(), h_s.stop_gradient(), phi_t, h_t),
    };
    let keep = h_s.one_minus().mul(h_t.one_minus())?;
    keep.mul(phi_s)?.add(h_t.mul(phi_t)?)
}

/// Transporter forward pass over one set of attached parameters.
pub struct Net<'a, 'g, T: Scalar> {
    cfg: &'a ModelConfig,
    vars: &'a BTreeMap<String, Var<'g, T>>,
    trace: Option<&'a Trace>,
}

/// Source-side outputs of one transported reconstruction.
pub struct PairOutput<'g, T: Scalar> {
    pub reconstruction: Var<'g, T>,
    pub transported: Var<'g, T>,
    pub source: KeypointVars<'g, T>,
}

impl<'a, 'g, T: Scalar> Net<'a, 'g, T> {
    pub fn new(cfg: &'a ModelConfig, vars: &'a BTreeMap<String, Var<'g, T>>) -> Self {
        Self {
            cfg,
            vars,
            trace: None,
        }
    }

    pub fn traced(mut self, trace: &'a Trace) -> Self {
        self.trace = Some(trace);
        self
    }

    fn var(&self, name: &str) -> Result<Var<'g, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("parameter set lacks {name}")))
    }

    fn conv(&self, x: Var<'g, T>, name: &str, stride: usize, pad: usize) -> Result<Var<'g, T>> {
        x.conv2d(
            self.var(&format!("{name}.w"))?,
            Some(self.var(&format!("{name}.b"))?),
            stride,
            pad,
        )
    }

    fn stage(&self, x: Var<'g, T>, name: &str, stride: usize) -> Result<Var<'g, T>> {
        Ok(self.conv(x, name, stride, 1)?.instance_norm(T::of(NORM_EPS))?.relu())
    }

    fn check_input(&self, x: Var<'g, T>, op: &'static str) -> Result<()> {
        let want = [self.cfg.input_channels, self.cfg.input_size, self.cfg.input_size];
        if x.shape() != want {
            return Err(Error::shape(op, &x.shape(), &want));
        }
        Ok(())
    }

    fn trunk(&self, x: Var<'g, T>, trunk: &str) -> Result<Var<'g, T>> {
        let mut h = x;
        for i in 1..=2 {
            h = self.stage(h, &format!("{trunk}.conv{i}"), 2)?;
            if self.cfg.cbam_enabled {
                h = self.cbam(h, &format!("{trunk}.cbam{i}"))?;
            }
        }
        Ok(h)
    }

    /// Channel then spatial attention gating.
    pub fn cbam(&self, x: Var<'g, T>, name: &str) -> Result<Var<'g, T>> {
        note(self.trace, "cbam");
        let s = x.shape();
        if s.len() != 3 {
            return Err(Error::shape("cbam", &s, &[0, 0, 0]));
        }
        let c = s[0];
        let mlp = |d: Var<'g, T>| -> Result<Var<'g, T>> {
            let h = self
                .var(&format!("{name}.mlp1.w"))?
                .matmul(d)?
                .add(self.var(&format!("{name}.mlp1.b"))?)?
                .relu();
            self.var(&format!("{name}.mlp2.w"))?
                .matmul(h)?
                .add(self.var(&format!("{name}.mlp2.b"))?)
        };
        let avg = x.mean_axes(&[1, 2])?.reshape(&[c, 1])?;
        let max = x.max_axes(&[1, 2])?.reshape(&[c, 1])?;
        let channel_gate = mlp(avg)?.add(mlp(max)?)?.sigmoid().reshape(&[c, 1, 1])?;
        let x = x.mul(channel_gate)?;
        let pooled = x.graph().concat(&[x.mean_axes(&[0])?, x.max_axes(&[0])?])?;
        let spatial_gate = self
            .conv(pooled, &format!("{name}.spatial"), 1, SPATIAL_KERNEL / 2)?
            .sigmoid();
        x.mul(spatial_gate)
    }

    /// `C×S×S` stack to the `C'×S/4×S/4` feature map Φ.
    pub fn encode(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        self.check_input(x, "encode")?;
        note(self.trace, "encode");
        self.trunk(x, "encoder")
    }

    pub fn keynet(&self, x: Var<'g, T>) -> Result<KeypointVars<'g, T>> {
        self.check_input(x, "keynet")?;
        note(self.trace, "keynet");
        let h = self.trunk(x, "keynet")?;
        let logits = self.conv(h, "keynet.head", 1, 0)?;
        keypoints_from_logits(logits, self.cfg.heatmap_sigma)
    }

    fn decoder(&self, phi: Var<'g, T>, prefix: &str, op: &'static str) -> Result<Var<'g, T>> {
        let f = self.cfg.feature_size();
        let want = [self.cfg.feature_channels(), f, f];
        if phi.shape() != want {
            return Err(Error::shape(op, &phi.shape(), &want));
        }
        let h = self.stage(phi.upsample2x()?, &format!("{prefix}.conv1"), 1)?;
        Ok(self.conv(h.upsample2x()?, &format!("{prefix}.conv2"), 1, 1)?.sigmoid())
    }

    /// Feature map back to a stack in `[0, 1]` at input resolution.
    pub fn refine(&self, phi: Var<'g, T>) -> Result<Var<'g, T>> {
        note(self.trace, "refine");
        self.decoder(phi, "refine", "refine")
    }

    /// Pretraining mirror decoder.
    pub fn decode(&self, phi: Var<'g, T>) -> Result<Var<'g, T>> {
        self.decoder(phi, "decoder", "decode")
    }

    pub fn transport(
        &self,
        phi_s: Var<'g, T>,
        phi_t: Var<'g, T>,
        h_s: Var<'g, T>,
        h_t: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        note(self.trace, "transport");
        transport_stopping(phi_s, phi_t, h_s, h_t, self.cfg.stop_side)
    }

    /// Target-branch features and keypoints.
    pub fn target_branch(&self, target: Var<'g, T>) -> Result<(Var<'g, T>, KeypointVars<'g, T>)> {
        Ok((self.encode(target)?, self.keynet(target)?))
    }

    /// Reconstruct the target from `source` given target features and
    /// combined target heatmap.
    pub fn reconstruct_from(
        &self,
        source: Var<'g, T>,
        phi_t: Var<'g, T>,
        h_t: Var<'g, T>,
    ) -> Result<PairOutput<'g, T>> {
        let phi_s = self.encode(source)?;
        let kp_s = self.keynet(source)?;
        let transported = self.transport(phi_s, phi_t, kp_s.combined, h_t)?;
        Ok(PairOutput {
            reconstruction: self.refine(transported)?,
            transported,
            source: kp_s,
        })
    }

    pub fn reconstruct(&self, source: Var<'g, T>, target: Var<'g, T>) -> Result<PairOutput<'g, T>> {
        let (phi_t, kp_t) = self.target_branch(target)?;
        self.reconstruct_from(source, phi_t, kp_t.combined)
    }
}

/// Keypoints of one preprocessed stack.
pub fn keypoints_for_stack(stack: &FeatureStack, params: &Params<f32>, cfg: &ModelConfig) -> Result<KeypointSet> {
    let g = Graph::<f32>::new();
    let vars = params.attach_frozen(&g);
    let x = g.constant(stack.to_tensor());
    Ok(Net::new(cfg, &vars).keynet(x)?.detach())
}

/// Keypoints of `frame` as `(row, col)` pixel coordinates of that frame.
pub fn infer_keypoints(
    frame: &Frame,
    params: &Params<f32>,
    cfg: &ModelConfig,
    pre: &Preprocess,
) -> Result<Vec<[f64; 2]>> {
    if pre.size != cfg.input_size {
        return Err(Error::invalid(format!(
            "preprocess size {} does not match model input_size {}",
            pre.size, cfg.input_size
        )));
    }
    let stack = pre.apply(frame)?;
    let kp = keypoints_for_stack(&stack, params, cfg)?;
    let f = cfg.feature_size();
    let scale_r = frame.rows() as f64 / cfg.input_size as f64;
    let scale_c = frame.cols() as f64 / cfg.input_size as f64;
    Ok(kp
        .coords
        .iter()
        .map(|&[r, c]| {
            let pr = cfg.cell_to_pixel(normalized_to_cell(r, f));
            let pc = cfg.cell_to_pixel(normalized_to_cell(c, f));
            [(pr + 0.5) * scale_r - 0.5, (pc + 0.5) * scale_c - 0.5]
        })
        .collect())
}
