//! The learnable stack: a small convolutional feature extractor, the
//! anchor-free contour initialization head, and one contour transformer
//! per refinement stage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv2dSpec, ParamId, ParamStore, Tape, Tensor, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geometry::{box_perimeter_sample, BBox, Contour, Point2};

/// Raster channels produced by the scene generator.
pub const INPUT_CHANNELS: usize = 1;
/// Feature stride of the backbone (two 2×2 pools).
pub const FEATURE_STRIDE: f64 = 4.0;
/// Prior probability used to bias the classification logits at init.
const CLS_PRIOR: f64 = 0.01;

/// Forward-pass context: the tape, a read-only parameter store and the
/// dropout stream.
pub struct Fwd<'a> {
    pub tape: Tape,
    params: &'a ParamStore,
    cache: Vec<Option<Var>>,
    pub train: bool,
    rng: ChaCha8Rng,
}

impl<'a> Fwd<'a> {
    pub fn new(params: &'a ParamStore, train: bool, seed: u64) -> Self {
        Self {
            tape: Tape::new(),
            params,
            cache: vec![None; params.len()],
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// The tape variable for a parameter; each parameter is copied once.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.cache[id.index()] {
            return v;
        }
        let v = self.tape.param(self.params, id);
        self.cache[id.index()] = Some(v);
        v
    }

    fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        Ok(self.tape.dropout(x, p, self.train, &mut self.rng)?)
    }
}

#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (1.0 / fan_in as f64).sqrt();
        Self {
            w: store.add_normal(&format!("{name}.w"), &[fan_in, fan_out], std, rng),
            b: store.add_full(&format!("{name}.b"), &[fan_out], 0.0),
        }
    }

    fn with_std(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, std: f64, bias: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: store.add_normal(&format!("{name}.w"), &[fan_in, fan_out], std, rng),
            b: store.add_full(&format!("{name}.b"), &[fan_out], bias),
        }
    }

    fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let (w, b) = (f.p(self.w), f.p(self.b));
        let y = f.tape.matmul(x, w)?;
        Ok(f.tape.add(y, b)?)
    }
}

/// Layer normalization over the last axis with a learned affine.
#[derive(Debug, Clone)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            g: store.add_full(&format!("{name}.g"), &[dim], 1.0),
            b: store.add_full(&format!("{name}.b"), &[dim], 0.0),
        }
    }

    fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let axis = f.tape.shape(x).len() - 1;
        let n = f.tape.layer_norm(x, axis)?;
        let (g, b) = (f.p(self.g), f.p(self.b));
        let y = f.tape.mul(n, g)?;
        Ok(f.tape.add(y, b)?)
    }
}

#[derive(Debug, Clone)]
struct Conv {
    w: ParamId,
    b: ParamId,
    spec: Conv2dSpec,
}

impl Conv {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, spec: Conv2dSpec, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = cin * spec.kernel * spec.kernel;
        Self {
            w: store.add_he(&format!("{name}.w"), &[cout, cin, spec.kernel, spec.kernel], fan_in, rng),
            b: store.add_full(&format!("{name}.b"), &[cout], 0.0),
            spec,
        }
    }

    fn forward(&self, f: &mut Fwd, x: Var) -> Result<Var> {
        let (w, b) = (f.p(self.w), f.p(self.b));
        Ok(f.tape.conv2d(x, w, b, self.spec)?)
    }
}

const K3: Conv2dSpec = Conv2dSpec {
    kernel: 3,
    dilation: 1,
};

/// Fused feature grid `[C,H,W]` on a tape.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    pub var: Var,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: f64,
}

/// The three prediction maps of the init head, as tape variables.
#[derive(Debug, Clone, Copy)]
pub struct InitHeadOutput {
    /// `[1,H,W]` logits.
    pub cls: Var,
    /// `[4,H,W]` distances (left, top, right, bottom) from the cell center
    /// to the box sides, in feature-grid units, always positive.
    pub boxes: Var,
    /// `[2·N_a,H,W]` per-vertex offsets `(dx0, dy0, dx1, ...)` in grid units.
    pub offsets: Var,
}

/// Detached values of [`InitHeadOutput`] for decoding and allocation.
#[derive(Debug, Clone, PartialEq)]
pub struct InitMaps {
    pub cls: Tensor,
    pub boxes: Tensor,
    pub offsets: Tensor,
    pub stride: f64,
}

impl InitMaps {
    pub fn from_tape(tape: &Tape, out: &InitHeadOutput, stride: f64) -> Self {
        Self {
            cls: tape.value(out.cls).clone(),
            boxes: tape.value(out.boxes).clone(),
            offsets: tape.value(out.offsets).clone(),
            stride,
        }
    }

    pub fn height(&self) -> usize {
        self.cls.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.cls.shape()[2]
    }

    pub fn cells(&self) -> usize {
        self.height() * self.width()
    }

    pub fn num_vertices(&self) -> usize {
        self.offsets.shape()[0] / 2
    }

    pub fn logit(&self, cell: usize) -> f64 {
        self.cls.data()[cell]
    }

    /// Scene-coordinate center of a row-major cell index.
    pub fn cell_center(&self, cell: usize) -> Point2 {
        cell_center(cell, self.width(), self.stride)
    }

    pub fn distances(&self, cell: usize) -> [f64; 4] {
        let n = self.cells();
        std::array::from_fn(|k| self.boxes.data()[k * n + cell])
    }

    pub fn offsets_at(&self, cell: usize) -> Vec<f64> {
        let n = self.cells();
        (0..2 * self.num_vertices())
            .map(|k| self.offsets.data()[k * n + cell])
            .collect()
    }

    /// Box decoded at a cell, in scene coordinates.
    pub fn box_at(&self, cell: usize) -> BBox {
        decode_box(self.cell_center(cell), self.distances(cell), self.stride)
    }
}

pub fn cell_center(cell: usize, width: usize, stride: f64) -> Point2 {
    let (row, col) = (cell / width, cell % width);
    Point2::new((col as f64 + 0.5) * stride, (row as f64 + 0.5) * stride)
}

pub fn decode_box(center: Point2, d: [f64; 4], stride: f64) -> BBox {
    BBox {
        x_min: center.x - d[0] * stride,
        y_min: center.y - d[1] * stride,
        x_max: center.x + d[2] * stride,
        y_max: center.y + d[3] * stride,
    }
}

/// A contour with its confidence and refinement stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub contour: Contour,
    pub score: f64,
    pub stage: usize,
    /// Box used for ground-truth matching: the decoded box at stage 0,
    /// the contour's bounding box after any refinement.
    pub bbox: BBox,
    /// Contour after each stage so far, starting with the initial one.
    pub history: Vec<Contour>,
}

impl Detection {
    pub fn initial(contour: Contour, score: f64, bbox: BBox) -> Self {
        Self {
            history: vec![contour.clone()],
            contour,
            score,
            stage: 0,
            bbox,
        }
    }
}

/// Threshold, sample the decoded box, add offsets. No suppression step:
/// every cell above `tau_a` yields a contour. At most `max_detections`
/// candidates are kept, highest score first (ties by cell index).
pub fn decode_initial_contours(maps: &InitMaps, tau_a: f64, max_detections: usize) -> Vec<Detection> {
    let n_a = maps.num_vertices();
    let mut cells: Vec<(usize, f64)> = (0..maps.cells())
        .map(|c| (c, sigmoid(maps.logit(c))))
        .filter(|(_, s)| *s > tau_a)
        .collect();
    cells.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    cells.truncate(max_detections);
    cells
        .into_iter()
        .filter_map(|(cell, score)| {
            let bbox = maps.box_at(cell);
            let samples = box_perimeter_sample(&bbox, n_a).ok()?;
            let off = maps.offsets_at(cell);
            let verts = samples
                .iter()
                .enumerate()
                .map(|(i, p)| Point2::new(p.x + off[2 * i] * maps.stride, p.y + off[2 * i + 1] * maps.stride))
                .collect();
            let contour = Contour::new(verts).ok()?;
            Some(Detection::initial(contour, score, bbox))
        })
        .collect()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Batched refinement outputs for `B` contours.
#[derive(Debug, Clone, Copy)]
pub struct RefinementOutput {
    /// `[B, N_a, 2]` vertex displacements in grid units.
    pub offsets: Var,
    /// `[B]` score logits.
    pub score_logits: Var,
}

/// Moves every vertex by its offset (grid units times `stride`) and takes
/// the new score from `score_logit`.
pub fn refine(det: &Detection, offsets: &[f64], score_logit: f64, stride: f64) -> Result<Detection> {
    let score = sigmoid(score_logit);
    refine_keep_score(det, offsets, score, stride)
}

pub(crate) fn refine_keep_score(det: &Detection, offsets: &[f64], score: f64, stride: f64) -> Result<Detection> {
    if offsets.len() != 2 * det.contour.len() {
        return Err(Error::Config(format!(
            "refine: {} offsets for {} vertices",
            offsets.len(),
            det.contour.len()
        )));
    }
    let verts = det
        .contour
        .vertices()
        .iter()
        .enumerate()
        .map(|(i, p)| Point2::new(p.x + offsets[2 * i] * stride, p.y + offsets[2 * i + 1] * stride))
        .collect();
    let contour = Contour::new(verts)?;
    let bbox = contour_box(&contour);
    let mut history = det.history.clone();
    history.push(contour.clone());
    Ok(Detection {
        contour,
        score,
        stage: det.stage + 1,
        bbox,
        history,
    })
}

/// Bounding box of a contour, padded to a hair of area when the contour
/// collapsed onto a line.
pub fn contour_box(c: &Contour) -> BBox {
    let mut b = BBox {
        x_min: f64::INFINITY,
        y_min: f64::INFINITY,
        x_max: f64::NEG_INFINITY,
        y_max: f64::NEG_INFINITY,
    };
    for p in c.vertices() {
        b.x_min = b.x_min.min(p.x);
        b.y_min = b.y_min.min(p.y);
        b.x_max = b.x_max.max(p.x);
        b.y_max = b.y_max.max(p.y);
    }
    if b.x_max - b.x_min < 1e-6 {
        b.x_max = b.x_min + 1e-6;
    }
    if b.y_max - b.y_min < 1e-6 {
        b.y_max = b.y_min + 1e-6;
    }
    b
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln1: Norm,
    qkv: Linear,
    proj: Linear,
    ln2: Norm,
    fc1: Linear,
    fc2: Linear,
}

/// MLP decoder head: two hidden layers of width C, each followed by
/// ReLU, layer normalization and dropout.
#[derive(Debug, Clone)]
struct Head {
    fc1: Linear,
    n1: Norm,
    fc2: Linear,
    n2: Norm,
    out: Linear,
}

impl Head {
    fn new(store: &mut ParamStore, name: &str, c: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), c, c, rng),
            n1: Norm::new(store, &format!("{name}.n1"), c),
            fc2: Linear::new(store, &format!("{name}.fc2"), c, c, rng),
            n2: Norm::new(store, &format!("{name}.n2"), c),
            out: Linear::with_std(store, &format!("{name}.out"), c, outputs, 1e-3, 0.0, rng),
        }
    }

    fn forward(&self, f: &mut Fwd, x: Var, dropout: f64) -> Result<Var> {
        let mut h = x;
        for (fc, n) in [(&self.fc1, &self.n1), (&self.fc2, &self.n2)] {
            h = fc.forward(f, h)?;
            h = f.tape.relu(h);
            h = n.forward(f, h)?;
            h = f.dropout(h, dropout)?;
        }
        self.out.forward(f, h)
    }
}

/// One contour refinement module.
#[derive(Debug, Clone)]
struct ContourTransformer {
    cls_token: ParamId,
    layers: Vec<EncoderLayer>,
    final_norm: Norm,
    reg: Head,
    cls: Head,
}

#[derive(Debug, Clone)]
struct InitHead {
    enhance: Vec<Conv>,
    predict: Conv,
}

/// Parameters and layer layout of the whole detector.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    backbone: Vec<Conv>,
    init_head: InitHead,
    refiners: Vec<ContourTransformer>,
}

/// Backbone conv widths; the last is the feature width `C`.
fn backbone_widths(c: usize) -> [usize; 4] {
    [16, 32, c, c]
}

/// Dilations of the three init-head enhancement convolutions.
const HEAD_DILATIONS: [usize; 3] = [2, 4, 8];

impl Model {
    /// Deterministic initialization from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.channels;

        let mut backbone = Vec::new();
        let mut cin = INPUT_CHANNELS;
        for (i, w) in backbone_widths(c).into_iter().enumerate() {
            backbone.push(Conv::new(&mut store, &format!("backbone.conv{i}"), cin, w, K3, &mut rng));
            cin = w;
        }

        let hc = config.head_channels;
        let mut enhance = Vec::new();
        let mut cin = c;
        for (i, d) in HEAD_DILATIONS.into_iter().enumerate() {
            let spec = Conv2dSpec {
                kernel: 3,
                dilation: d,
            };
            enhance.push(Conv::new(&mut store, &format!("init.conv{i}"), cin, hc, spec, &mut rng));
            cin = hc;
        }
        let n_out = 1 + 4 + 2 * config.num_vertices;
        let pw = store.add_normal("init.predict.w", &[n_out, hc, 1, 1], 0.01, &mut rng);
        let mut bias = vec![0.0; n_out];
        bias[0] = -((1.0 - CLS_PRIOR) / CLS_PRIOR).ln();
        for b in &mut bias[1..5] {
            *b = 4f64.ln();
        }
        let pb = store.add("init.predict.b", Tensor::vector(bias));
        let init_head = InitHead {
            enhance,
            predict: Conv {
                w: pw,
                b: pb,
                spec: Conv2dSpec {
                    kernel: 1,
                    dilation: 1,
                },
            },
        };

        let mut refiners = Vec::new();
        for s in 0..config.stages {
            let name = format!("stage{s}");
            let cls_token = store.add_normal(&format!("{name}.cls_token"), &[c], 0.02, &mut rng);
            let layers = (0..config.layers)
                .map(|l| {
                    let ln = format!("{name}.layer{l}");
                    EncoderLayer {
                        ln1: Norm::new(&mut store, &format!("{ln}.ln1"), c),
                        qkv: Linear::new(&mut store, &format!("{ln}.qkv"), c, 3 * c, &mut rng),
                        proj: Linear::new(&mut store, &format!("{ln}.proj"), c, c, &mut rng),
                        ln2: Norm::new(&mut store, &format!("{ln}.ln2"), c),
                        fc1: Linear::new(&mut store, &format!("{ln}.fc1"), c, config.mlp_hidden, &mut rng),
                        fc2: Linear::new(&mut store, &format!("{ln}.fc2"), config.mlp_hidden, c, &mut rng),
                    }
                })
                .collect();
            refiners.push(ContourTransformer {
                cls_token,
                layers,
                final_norm: Norm::new(&mut store, &format!("{name}.final_norm"), c),
                reg: Head::new(&mut store, &format!("{name}.reg"), c, 2, &mut rng),
                cls: Head::new(&mut store, &format!("{name}.cls"), c, 1, &mut rng),
            });
        }

        Ok(Self {
            config,
            params: store,
            backbone,
            init_head,
            refiners,
        })
    }

    pub fn stride(&self) -> f64 {
        FEATURE_STRIDE
    }

    /// Number of trained refinement modules.
    pub fn refiner_count(&self) -> usize {
        self.refiners.len()
    }

    /// `[C_in,H,W]` raster to a stride-4 feature map with `C` channels.
    pub fn backbone_forward(&self, f: &mut Fwd, raster: &Tensor) -> Result<FeatureMap> {
        let s = raster.shape();
        if s.len() != 3 || s[0] != INPUT_CHANNELS || s[1] < 4 || s[2] < 4 {
            return Err(Error::Data(format!("raster shape {s:?} is not [{INPUT_CHANNELS},H,W]")));
        }
        let mut x = f.tape.constant(raster.clone());
        for (i, conv) in self.backbone.iter().enumerate() {
            x = conv.forward(f, x)?;
            x = f.tape.relu(x);
            if i < 2 {
                x = f.tape.max_pool2(x)?;
            }
        }
        let shape = f.tape.shape(x).to_vec();
        Ok(FeatureMap {
            var: x,
            channels: shape[0],
            height: shape[1],
            width: shape[2],
            stride: FEATURE_STRIDE,
        })
    }

    pub fn init_head_forward(&self, f: &mut Fwd, fm: &FeatureMap) -> Result<InitHeadOutput> {
        let mut x = fm.var;
        for conv in &self.init_head.enhance {
            x = conv.forward(f, x)?;
            x = f.tape.relu(x);
        }
        let y = self.init_head.predict.forward(f, x)?;
        let n_a = self.config.num_vertices;
        let cls = f.tape.slice(y, 0, 0, 1)?;
        let raw = f.tape.slice(y, 0, 1, 5)?;
        let boxes = f.tape.exp(raw);
        let offsets = f.tape.slice(y, 0, 5, 5 + 2 * n_a)?;
        Ok(InitHeadOutput { cls, boxes, offsets })
    }

    fn refiner(&self, stage: usize) -> Result<&ContourTransformer> {
        if self.refiners.is_empty() {
            return Err(Error::Config("model has no refinement stages".into()));
        }
        Ok(&self.refiners[stage.min(self.refiners.len() - 1)])
    }

    /// `[B, N_a + 1, C]`: bilinear vertex features followed by the stage's
    /// classification token.
    pub fn sample_vertex_tokens(&self, f: &mut Fwd, fm: &FeatureMap, contours: &[Contour], stage: usize) -> Result<Var> {
        let n_a = self.config.num_vertices;
        let b = contours.len();
        let mut coords = Vec::with_capacity(2 * n_a * b);
        for c in contours {
            if c.len() != n_a {
                return Err(Error::Config(format!("contour has {} vertices, model expects {n_a}", c.len())));
            }
            for p in c.vertices() {
                coords.push(p.x / fm.stride);
                coords.push(p.y / fm.stride);
            }
        }
        let coords = f.tape.constant(Tensor::new(vec![b * n_a, 2], coords)?);
        let feats = f.tape.bilinear_sample(fm.var, coords)?;
        let c = fm.channels;
        let feats = f.tape.reshape(feats, &[b, n_a, c])?;
        let token = f.p(self.refiner(stage)?.cls_token);
        let token = f.tape.reshape(token, &[1, c])?;
        let tokens = f.tape.gather_rows(token, &vec![0; b])?;
        let tokens = f.tape.reshape(tokens, &[b, 1, c])?;
        Ok(f.tape.concat(&[feats, tokens], 1)?)
    }

    /// One pre-norm encoder layer over `[B*T, C]` rows.
    fn encoder_layer(&self, f: &mut Fwd, layer: &EncoderLayer, z: Var, b: usize, t: usize) -> Result<Var> {
        let c = self.config.channels;
        let heads = self.config.heads;
        let dh = c / heads;
        let h = layer.ln1.forward(f, z)?;
        let qkv = layer.qkv.forward(f, h)?;
        let qkv = f.tape.reshape(qkv, &[b, t, 3, heads, dh])?;
        let qkv = f.tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let qkv = f.tape.reshape(qkv, &[3, b * heads, t, dh])?;
        let mut qkv_parts = Vec::with_capacity(3);
        for i in 0..3 {
            let part = f.tape.slice(qkv, 0, i, i + 1)?;
            qkv_parts.push(f.tape.reshape(part, &[b * heads, t, dh])?);
        }
        let kt = f.tape.transpose(qkv_parts[1])?;
        let scores = f.tape.matmul(qkv_parts[0], kt)?;
        let scores = f.tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = f.tape.softmax(scores, 2)?;
        let ctx = f.tape.matmul(attn, qkv_parts[2])?;
        let ctx = f.tape.reshape(ctx, &[b, heads, t, dh])?;
        let ctx = f.tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = f.tape.reshape(ctx, &[b * t, c])?;
        let msa = layer.proj.forward(f, ctx)?;
        let z1 = f.tape.add(msa, z)?;

        let h = layer.ln2.forward(f, z1)?;
        let h = layer.fc1.forward(f, h)?;
        let h = f.tape.gelu(h);
        let h = layer.fc2.forward(f, h)?;
        Ok(f.tape.add(h, z1)?)
    }

    /// Runs the encoder layers of `stage` on `[B, T, C]` tokens and returns
    /// the final `[B*T, C]` rows.
    pub fn encode(&self, f: &mut Fwd, tokens: Var, stage: usize) -> Result<Var> {
        let s = f.tape.shape(tokens).to_vec();
        let [b, t, c] = s.as_slice() else {
            return Err(Error::Config(format!("tokens shape {s:?} is not [B,T,C]")));
        };
        let (b, t, c) = (*b, *t, *c);
        let module = self.refiner(stage)?;
        let mut z = f.tape.reshape(tokens, &[b * t, c])?;
        for layer in &module.layers {
            z = self.encoder_layer(f, layer, z, b, t)?;
        }
        module.final_norm.forward(f, z)
    }

    /// Single encoder layer on `[T, C]` tokens (one contour), exposed for
    /// shape and equivariance checks.
    pub fn encoder_layer_forward(&self, f: &mut Fwd, z: Var, stage: usize, layer: usize) -> Result<Var> {
        let s = f.tape.shape(z).to_vec();
        if s.len() != 2 || s[1] != self.config.channels {
            return Err(Error::Config(format!(
                "encoder layer expects [T, {}], got {s:?}",
                self.config.channels
            )));
        }
        let module = self.refiner(stage)?;
        let layer = module
            .layers
            .get(layer)
            .ok_or_else(|| Error::Config(format!("no encoder layer {layer}")))?;
        self.encoder_layer(f, layer, z, 1, s[0])
    }

    /// Tokens, `L` encoder layers, then the Reg head on the vertex rows and
    /// the Cls head on the classification-token row.
    pub fn contour_transformer_forward(&self, f: &mut Fwd, fm: &FeatureMap, contours: &[Contour], stage: usize) -> Result<RefinementOutput> {
        if contours.is_empty() {
            return Err(Error::Config("no contours to refine".into()));
        }
        let n_a = self.config.num_vertices;
        let b = contours.len();
        let t = n_a + 1;
        let tokens = self.sample_vertex_tokens(f, fm, contours, stage)?;
        let z = self.encode(f, tokens, stage)?;
        let vertex_rows: Vec<usize> = (0..b).flat_map(|i| (0..n_a).map(move |k| i * t + k)).collect();
        let cls_rows: Vec<usize> = (0..b).map(|i| i * t + n_a).collect();
        let module = self.refiner(stage)?;
        let dropout = self.config.dropout;

        let v = f.tape.gather_rows(z, &vertex_rows)?;
        let off = module.reg.forward(f, v, dropout)?;
        let offsets = f.tape.reshape(off, &[b, n_a, 2])?;

        let cz = f.tape.gather_rows(z, &cls_rows)?;
        let logit = module.cls.forward(f, cz, dropout)?;
        let score_logits = f.tape.reshape(logit, &[b])?;
        Ok(RefinementOutput { offsets, score_logits })
    }

    /// Full detection pass with early stop. `stages` may exceed the number of
    /// trained modules, in which case the last module is reused.
    pub fn infer(&self, raster: &Tensor, stages: usize) -> Result<InferenceOutput> {
        let mut f = Fwd::new(&self.params, false, 0);
        let fm = self.backbone_forward(&mut f, raster)?;
        let head = self.init_head_forward(&mut f, &fm)?;
        let maps = InitMaps::from_tape(&f.tape, &head, fm.stride);
        let dets = decode_initial_contours(&maps, self.config.tau_a, self.config.max_detections);
        self.multi_stage_inference(&mut f, &fm, dets, stages)
    }

    /// Refines `initial` detections stage by stage. With re-scoring enabled,
    /// a detection whose score reaches `tau_b` is frozen, and the final list
    /// keeps only detections scoring at least `tau_b`.
    pub fn multi_stage_inference(&self, f: &mut Fwd, fm: &FeatureMap, initial: Vec<Detection>, stages: usize) -> Result<InferenceOutput> {
        let mut dets = initial;
        let mut refine_calls = vec![0; stages];
        let rescore = self.config.rescore;
        let mut active: Vec<usize> = (0..dets.len()).collect();
        if stages > 0 && self.refiners.is_empty() {
            return Err(Error::Config("model has no refinement stages".into()));
        }
        for (stage, calls) in refine_calls.iter_mut().enumerate() {
            if active.is_empty() {
                break;
            }
            let contours: Vec<Contour> = active.iter().map(|&i| dets[i].contour.clone()).collect();
            let out = self.contour_transformer_forward(f, fm, &contours, stage)?;
            *calls = active.len();
            let offsets = f.tape.value(out.offsets).data().to_vec();
            let logits = f.tape.value(out.score_logits).data().to_vec();
            let per = 2 * self.config.num_vertices;
            for (k, &i) in active.iter().enumerate() {
                let off = &offsets[k * per..(k + 1) * per];
                dets[i] = if rescore {
                    refine(&dets[i], off, logits[k], fm.stride)?
                } else {
                    refine_keep_score(&dets[i], off, dets[i].score, fm.stride)?
                };
            }
            if rescore {
                active.retain(|&i| dets[i].score < self.config.tau_b);
            }
        }
        let mut rejected = Vec::new();
        if rescore {
            let tau_b = self.config.tau_b;
            (dets, rejected) = dets.into_iter().partition(|d| d.score >= tau_b);
        }
        Ok(InferenceOutput {
            detections: dets,
            rejected,
            refine_calls,
        })
    }
}

#[derive(Debug, Clone)]
pub struct InferenceOutput {
    pub detections: Vec<Detection>,
    /// Refined contours whose final score fell below `tau_b`.
    pub rejected: Vec<Detection>,
    /// Contours refined at each stage.
    pub refine_calls: Vec<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(n_a: usize) -> ModelConfig {
        ModelConfig {
            num_vertices: n_a,
            channels: 16,
            heads: 4,
            layers: 2,
            mlp_hidden: 32,
            head_channels: 8,
            ..ModelConfig::default()
        }
    }

    fn hand_maps(h: usize, w: usize, n_a: usize) -> InitMaps {
        InitMaps {
            cls: Tensor::full(&[1, h, w], -10.0),
            boxes: Tensor::full(&[4, h, w], 1.0),
            offsets: Tensor::zeros(&[2 * n_a, h, w]),
            stride: 4.0,
        }
    }

    #[test]
    fn decode_empty_below_threshold() {
        let maps = hand_maps(8, 8, 8);
        assert!(decode_initial_contours(&maps, 0.45, 100).is_empty());
    }

    #[test]
    fn decode_zero_offsets_gives_box_samples() {
        let mut maps = hand_maps(8, 8, 8);
        let cell = 3 * 8 + 5;
        maps.cls.data_mut()[cell] = 2.0;
        let dets = decode_initial_contours(&maps, 0.45, 100);
        assert_eq!(dets.len(), 1);
        let b = maps.box_at(cell);
        assert_eq!(dets[0].contour.vertices(), &box_perimeter_sample(&b, 8).unwrap()[..]);
        assert_eq!(dets[0].stage, 0);
        assert!((dets[0].score - sigmoid(2.0)).abs() < 1e-15);
    }

    #[test]
    fn decode_hand_computed_cell() {
        // cell (row 2, col 3) at stride 4 -> center (14, 10); distances
        // (4, 2, 4, 2) grid units -> box [-2, 2, 30, 18]; perimeter 96, so 8
        // samples every 12 units clockwise from (-2, 2).
        let mut maps = hand_maps(6, 6, 8);
        let cell = 2 * 6 + 3;
        maps.cls.data_mut()[cell] = 5.0;
        let n = 36;
        for (k, d) in [4.0, 2.0, 4.0, 2.0].into_iter().enumerate() {
            maps.boxes.data_mut()[k * n + cell] = d;
        }
        for k in 0..16 {
            maps.offsets.data_mut()[k * n + cell] = 0.25 * (k as f64 - 8.0);
        }
        let dets = decode_initial_contours(&maps, 0.45, 100);
        let samples = [
            (-2.0, 2.0),
            (10.0, 2.0),
            (22.0, 2.0),
            (30.0, 6.0),
            (30.0, 18.0),
            (18.0, 18.0),
            (6.0, 18.0),
            (-2.0, 14.0),
        ];
        for (i, (x, y)) in samples.into_iter().enumerate() {
            let ox = 0.25 * (2.0 * i as f64 - 8.0) * 4.0;
            let oy = 0.25 * (2.0 * i as f64 + 1.0 - 8.0) * 4.0;
            let v = dets[0].contour.vertices()[i];
            assert!((v.x - (x + ox)).abs() < 1e-6 && (v.y - (y + oy)).abs() < 1e-6, "vertex {i}: {v:?}");
        }
    }

    #[test]
    fn init_head_shapes() {
        let cfg = ModelConfig {
            head_channels: 8,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, 0).unwrap();
        let mut f = Fwd::new(&model.params, false, 0);
        let fm = model.backbone_forward(&mut f, &Tensor::zeros(&[1, 128, 128])).unwrap();
        assert_eq!((fm.channels, fm.height, fm.width), (64, 32, 32));
        let out = model.init_head_forward(&mut f, &fm).unwrap();
        assert_eq!(f.tape.shape(out.cls), &[1, 32, 32]);
        assert_eq!(f.tape.shape(out.boxes), &[4, 32, 32]);
        assert_eq!(f.tape.shape(out.offsets), &[64, 32, 32]);
        assert!(f.tape.value(out.boxes).data().iter().all(|v| *v >= 0.0));
        assert!(f.tape.value(fm.var).is_finite());
    }

    #[test]
    fn refine_zero_and_exact_offsets() {
        let c = Contour::new(vec![Point2::new(0.0, 0.0), Point2::new(4.0, 0.0), Point2::new(4.0, 4.0), Point2::new(0.0, 4.0)]).unwrap();
        let det = Detection::initial(c.clone(), 0.7, contour_box(&c));
        let same = refine(&det, &[0.0; 8], 0.0, 4.0).unwrap();
        assert_eq!(same.contour, c);
        assert_eq!(same.stage, 1);
        assert_eq!(same.score, 0.5);
        let gt = [(1.0, 1.0), (9.0, 0.0), (8.0, 6.0), (-2.0, 5.0)];
        let off: Vec<f64> = gt
            .iter()
            .zip(c.vertices())
            .flat_map(|(g, p)| [(g.0 - p.x) / 4.0, (g.1 - p.y) / 4.0])
            .collect();
        let moved = refine(&det, &off, 1.0, 4.0).unwrap();
        for (v, g) in moved.contour.vertices().iter().zip(gt) {
            assert!((v.x - g.0).abs() < 1e-12 && (v.y - g.1).abs() < 1e-12);
        }
        assert_eq!(moved.bbox, BBox { x_min: -2.0, y_min: 0.0, x_max: 9.0, y_max: 6.0 });
        assert_eq!(moved.history.len(), 2);
    }

    #[test]
    fn transformer_output_shapes_for_vertex_sweep() {
        for n_a in [16, 24, 32, 40, 48] {
            let model = Model::new(small_config(n_a), 1).unwrap();
            let mut f = Fwd::new(&model.params, false, 0);
            let fm = model.backbone_forward(&mut f, &Tensor::full(&[1, 32, 32], 0.3)).unwrap();
            let out = model.init_head_forward(&mut f, &fm).unwrap();
            assert_eq!(f.tape.shape(out.offsets), &[2 * n_a, 8, 8]);
            let b = BBox::new(4.0, 6.0, 20.0, 14.0).unwrap();
            let contour = Contour::new(box_perimeter_sample(&b, n_a).unwrap()).unwrap();
            let tokens = model.sample_vertex_tokens(&mut f, &fm, &[contour.clone()], 0).unwrap();
            assert_eq!(f.tape.shape(tokens), &[1, n_a + 1, 16]);
            let r = model.contour_transformer_forward(&mut f, &fm, &[contour.clone(), contour], 1).unwrap();
            assert_eq!(f.tape.shape(r.offsets), &[2, n_a, 2]);
            assert_eq!(f.tape.shape(r.score_logits), &[2]);
        }
    }

    #[test]
    fn default_model_has_configured_stages_and_layers() {
        let model = Model::new(ModelConfig::default(), 0).unwrap();
        assert_eq!(model.refiner_count(), 2);
        assert!(model.refiners.iter().all(|r| r.layers.len() == 4));
    }
}
