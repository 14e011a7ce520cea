//! The fully convolutional network: a strided conv pyramid, the position and
//! kernel heads shared by every stage, the high-resolution feature path and
//! the feature encoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ops, ParamSet, Scalar, Tape, Tensor, Var};

/// Prior probability the thing-center logits are initialized to.
pub const THING_PRIOR: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_th: usize,
    pub n_st: usize,
    /// Channels of the head and encoder convolutions.
    pub c_mid: usize,
    /// Kernel and feature embedding width.
    pub c_e: usize,
    /// 3x3 convolutions in each head.
    pub conv_num: usize,
    /// 3x3 convolutions in the feature encoder.
    pub encoder_convs: usize,
    pub stage_strides: Vec<usize>,
    pub encoder_stride: usize,
    /// Width of every backbone level.
    pub backbone_channels: usize,
    /// Convolutions per backbone level (the first one strided).
    pub backbone_depth: usize,
    pub gn_groups: usize,
    /// Append coordinate channels before the kernel head.
    pub coord_kernel: bool,
    /// Append coordinate channels before the feature encoder.
    pub coord_encoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_th: 3,
            n_st: 2,
            c_mid: 32,
            c_e: 64,
            conv_num: 3,
            encoder_convs: 2,
            stage_strides: vec![8, 16, 32],
            encoder_stride: 4,
            backbone_channels: 32,
            backbone_depth: 2,
            gn_groups: 8,
            coord_kernel: true,
            coord_encoder: true,
        }
    }
}

impl ModelConfig {
    pub fn stages(&self) -> usize {
        self.stage_strides.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.n_th == 0 || self.n_st == 0 {
            return bad("n_th and n_st must be >= 1".into());
        }
        if self.c_e == 0 || self.c_mid == 0 || self.conv_num == 0 || self.encoder_convs == 0 {
            return bad("c_e, c_mid, conv_num and encoder_convs must be >= 1".into());
        }
        if self.backbone_depth == 0 {
            return bad("backbone_depth must be >= 1".into());
        }
        if self.encoder_stride != 4 {
            return bad(format!("encoder_stride must be 4, got {}", self.encoder_stride));
        }
        if self.stage_strides.is_empty() {
            return bad("at least one stage is required".into());
        }
        let mut prev = self.encoder_stride;
        for &s in &self.stage_strides {
            if s <= prev || s % prev != 0 || !(s / prev).is_power_of_two() {
                return bad(format!(
                    "stage strides must increase by powers of two from 4, got {:?}",
                    self.stage_strides
                ));
            }
            prev = s;
        }
        let g = self.gn_groups;
        let half = self.backbone_channels / 2;
        if g == 0 || half == 0 || half % g != 0 || self.backbone_channels % g != 0 || self.c_mid % g != 0 {
            return bad(format!(
                "gn_groups {g} must divide backbone_channels/2, backbone_channels and c_mid"
            ));
        }
        Ok(())
    }

    pub fn max_stride(&self) -> usize {
        *self.stage_strides.last().expect("validated")
    }

    /// Closed-form parameter count. With `conv(i, o, k) = o*i*k*k + o`,
    /// `gn(c) = 2c`, `B = backbone_channels`, `D = backbone_depth`,
    /// `M = c_mid` and `L` the total number of stride-2 convs from stride 4
    /// to the last stage:
    ///
    /// ```text
    /// stem      conv(3, B/2, 3) + gn(B/2) + conv(B/2, B, 3) + gn(B) + (D-1)(conv(B, B, 3) + gn(B))
    /// stages    L (conv(B, B, 3) + gn(B)) + S (D-1)(conv(B, B, 3) + gn(B))
    /// F_h       (S + 1) conv(B, c_e, 1)
    /// position  conv(B, M, 3) + (conv_num-1) conv(M, M, 3) + conv_num gn(M) + conv(M, n_th+n_st, 1)
    /// kernel    conv(B+2, M, 3) + (conv_num-1) conv(M, M, 3) + conv_num gn(M) + conv(M, c_e, 1)
    /// encoder   conv(c_e+2, M, 3) + (E-1) conv(M, M, 3) + E gn(M) + conv(M, c_e, 1)
    /// ```
    pub fn param_count(&self) -> usize {
        let conv = |i: usize, o: usize, k: usize| o * i * k * k + o;
        let gn = |c: usize| 2 * c;
        let (b, d, m, s) = (self.backbone_channels, self.backbone_depth, self.c_mid, self.stages());
        let l = (self.max_stride() / self.encoder_stride).trailing_zeros() as usize;
        let block = conv(b, b, 3) + gn(b);
        let stem = conv(3, b / 2, 3) + gn(b / 2) + conv(b / 2, b, 3) + gn(b) + (d - 1) * block;
        let stages = l * block + s * (d - 1) * block;
        let fh = (s + 1) * conv(b, self.c_e, 1);
        let tower = |first_in: usize, n: usize| conv(first_in, m, 3) + (n - 1) * conv(m, m, 3) + n * gn(m);
        let pos = tower(b, self.conv_num) + conv(m, self.n_th + self.n_st, 1);
        let ker = tower(b + 2, self.conv_num) + conv(m, self.c_e, 1);
        let enc = tower(self.c_e + 2, self.encoder_convs) + conv(m, self.c_e, 1);
        stem + stages + fh + pos + ker + enc
    }
}

/// Per-stage head outputs.
#[derive(Clone, Debug)]
pub struct StageOutput<T> {
    /// `[n_th, H_i, W_i]` center probabilities.
    pub l_th: Tensor<T>,
    /// `[n_st, H_i, W_i]` stuff probabilities.
    pub l_st: Tensor<T>,
    /// `[c_e, H_i, W_i]` kernel weight map.
    pub g: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ModelOutput<T> {
    pub stages: Vec<StageOutput<T>>,
    /// `[c_e, H/4, W/4]` encoded feature.
    pub f_e: Tensor<T>,
}

/// Tape handles of one stage's outputs.
#[derive(Clone, Copy, Debug)]
pub struct StageVars {
    pub l_th: Var,
    pub l_st: Var,
    pub g: Var,
}

/// Tape handles of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub stages: Vec<StageVars>,
    /// Backbone features `X_i`, one per stage.
    pub features: Vec<Var>,
    pub f_h: Var,
    pub f_e: Var,
}

/// The model architecture; parameters live in a separate [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct PanopticFcn {
    pub cfg: ModelConfig,
}

struct Init {
    rng: ChaCha8Rng,
    params: Vec<(String, Tensor<f64>)>,
}

impl Init {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.params.push((name, Tensor::new(shape, data).expect("shape")));
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, relu_gain: bool) {
        let fan_in = (cin * k * k) as f64;
        let bound = if relu_gain { (6.0 / fan_in).sqrt() } else { (1.0 / fan_in).sqrt() };
        self.uniform(format!("{prefix}.w"), &[cout, cin, k, k], bound);
        self.params.push((format!("{prefix}.b"), Tensor::zeros(&[cout])));
    }

    fn gn(&mut self, prefix: &str, c: usize) {
        self.params.push((format!("{prefix}.gamma"), Tensor::full(&[c], 1.0)));
        self.params.push((format!("{prefix}.beta"), Tensor::zeros(&[c])));
    }

    fn block(&mut self, prefix: &str, cin: usize, cout: usize) {
        self.conv(prefix, cin, cout, 3, true);
        self.gn(&format!("{prefix}.gn"), cout);
    }
}

impl PanopticFcn {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(PanopticFcn { cfg })
    }

    /// Backbone conv names grouped by level: the stride-4 level first, then
    /// one group per stage. Each entry is `(name, stride)`.
    fn backbone_layout(&self) -> Vec<Vec<(String, usize)>> {
        let c = &self.cfg;
        let mut levels = Vec::new();
        let mut first = vec![("backbone.stem".to_string(), 2), ("backbone.s4.down".to_string(), 2)];
        first.extend((1..c.backbone_depth).map(|j| (format!("backbone.s4.conv{j}"), 1)));
        levels.push(first);
        let mut prev = c.encoder_stride;
        for (i, &s) in c.stage_strides.iter().enumerate() {
            let downs = (s / prev).trailing_zeros() as usize;
            let mut level: Vec<(String, usize)> =
                (0..downs).map(|j| (format!("backbone.p{i}.down{j}"), 2)).collect();
            level.extend((1..c.backbone_depth).map(|j| (format!("backbone.p{i}.conv{j}"), 1)));
            levels.push(level);
            prev = s;
        }
        levels
    }

    /// Deterministic initialization. Values are drawn in `f64` and cast, so
    /// both precisions start from the same point.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamSet<T> {
        let c = &self.cfg;
        let b = c.backbone_channels;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Vec::new(),
        };
        for level in self.backbone_layout() {
            for (name, _) in level {
                let cin = if name == "backbone.stem" {
                    3
                } else if name == "backbone.s4.down" {
                    b / 2
                } else {
                    b
                };
                let cout = if name == "backbone.stem" { b / 2 } else { b };
                init.block(&name, cin, cout);
            }
        }
        for l in 0..=c.stages() {
            init.conv(&format!("fh.proj{l}"), b, c.c_e, 1, false);
        }
        for j in 0..c.conv_num {
            init.block(&format!("pos.conv{j}"), if j == 0 { b } else { c.c_mid }, c.c_mid);
        }
        init.conv("pos.out", c.c_mid, c.n_th + c.n_st, 1, false);
        let prior = -((1.0 - THING_PRIOR) / THING_PRIOR).ln();
        let (_, bias) = init.params.last_mut().expect("just pushed");
        for v in &mut bias.data_mut()[..c.n_th] {
            *v = prior;
        }
        for j in 0..c.conv_num {
            init.block(&format!("kernel.conv{j}"), if j == 0 { b + 2 } else { c.c_mid }, c.c_mid);
        }
        init.conv("kernel.out", c.c_mid, c.c_e, 1, false);
        for j in 0..c.encoder_convs {
            init.block(&format!("enc.conv{j}"), if j == 0 { c.c_e + 2 } else { c.c_mid }, c.c_mid);
        }
        init.conv("enc.out", c.c_mid, c.c_e, 1, false);

        let mut params = ParamSet::new();
        for (name, t) in init.params {
            params.insert(name, t.cast()).expect("unique names");
        }
        params
    }

    pub fn check_input(&self, image: &Tensor<impl Scalar>) -> Result<(usize, usize)> {
        let (c, h, w) = image.chw()?;
        let s = self.cfg.max_stride();
        if c != 3 || h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::Shape(format!(
                "input must be [3, H, W] with H, W divisible by {s}, got {:?}",
                image.shape()
            )));
        }
        Ok((h, w))
    }

    fn block<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &ParamSet<T>,
        prefix: &str,
        x: Var,
        stride: usize,
    ) -> Result<Var> {
        let w = tape.param(p, &format!("{prefix}.w"))?;
        let b = tape.param(p, &format!("{prefix}.b"))?;
        let y = tape.conv2d(x, w, b, stride, 1)?;
        let g = tape.param(p, &format!("{prefix}.gn.gamma"))?;
        let be = tape.param(p, &format!("{prefix}.gn.beta"))?;
        let y = tape.group_norm(y, g, be, self.cfg.gn_groups)?;
        Ok(tape.relu(y))
    }

    fn pointwise<T: Scalar>(&self, tape: &mut Tape<T>, p: &ParamSet<T>, prefix: &str, x: Var) -> Result<Var> {
        let w = tape.param(p, &format!("{prefix}.w"))?;
        let b = tape.param(p, &format!("{prefix}.b"))?;
        tape.conv2d(x, w, b, 1, 0)
    }

    /// Appends `[x, y]` coordinate channels, or two zero channels when `enabled` is false.
    pub fn coord_concat<T: Scalar>(tape: &mut Tape<T>, x: Var, enabled: bool) -> Result<Var> {
        let (_, h, w) = tape.value(x).chw()?;
        let coords = if enabled {
            ops::coord_channels(h, w)
        } else {
            Tensor::zeros(&[2, h, w])
        };
        let c = tape.constant(coords);
        tape.concat_channels(x, c)
    }

    /// Returns the stride-4 feature and the per-stage features `X_i`.
    pub fn backbone<T: Scalar>(&self, tape: &mut Tape<T>, p: &ParamSet<T>, image: Var) -> Result<(Var, Vec<Var>)> {
        self.check_input(tape.value(image))?;
        let mut x = image;
        let mut outs = Vec::new();
        for level in self.backbone_layout() {
            for (name, stride) in level {
                x = self.block(tape, p, &name, x, stride)?;
            }
            outs.push(x);
        }
        let s4 = outs.remove(0);
        Ok((s4, outs))
    }

    /// `F_h`: the stride-4 feature and every stage feature, each projected to
    /// `c_e` channels, upsampled to stride 4 and summed.
    pub fn high_res_feature<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &ParamSet<T>,
        s4: Var,
        features: &[Var],
    ) -> Result<Var> {
        let (_, h4, w4) = tape.value(s4).chw()?;
        let mut acc = self.pointwise(tape, p, "fh.proj0", s4)?;
        for (i, &x) in features.iter().enumerate() {
            let proj = self.pointwise(tape, p, &format!("fh.proj{}", i + 1), x)?;
            let up = tape.resize(proj, h4, w4)?;
            acc = tape.add(acc, up)?;
        }
        Ok(acc)
    }

    /// Shared position head: `(l_th, l_st)` probabilities.
    pub fn position_head<T: Scalar>(&self, tape: &mut Tape<T>, p: &ParamSet<T>, x: Var) -> Result<(Var, Var)> {
        let mut y = x;
        for j in 0..self.cfg.conv_num {
            y = self.block(tape, p, &format!("pos.conv{j}"), y, 1)?;
        }
        let logits = self.pointwise(tape, p, "pos.out", y)?;
        let probs = tape.sigmoid(logits);
        let n_th = self.cfg.n_th;
        let l_th = tape.slice_channels(probs, 0, n_th)?;
        let l_st = tape.slice_channels(probs, n_th, n_th + self.cfg.n_st)?;
        Ok((l_th, l_st))
    }

    /// Shared kernel head: the `[c_e, H_i, W_i]` kernel weight map.
    pub fn kernel_head<T: Scalar>(&self, tape: &mut Tape<T>, p: &ParamSet<T>, x: Var) -> Result<Var> {
        let mut y = Self::coord_concat(tape, x, self.cfg.coord_kernel)?;
        for j in 0..self.cfg.conv_num {
            y = self.block(tape, p, &format!("kernel.conv{j}"), y, 1)?;
        }
        self.pointwise(tape, p, "kernel.out", y)
    }

    pub fn feature_encoder<T: Scalar>(&self, tape: &mut Tape<T>, p: &ParamSet<T>, f_h: Var) -> Result<Var> {
        let mut y = Self::coord_concat(tape, f_h, self.cfg.coord_encoder)?;
        for j in 0..self.cfg.encoder_convs {
            y = self.block(tape, p, &format!("enc.conv{j}"), y, 1)?;
        }
        self.pointwise(tape, p, "enc.out", y)
    }

    /// Records a full forward pass on `tape`.
    pub fn forward_tape<T: Scalar>(&self, tape: &mut Tape<T>, p: &ParamSet<T>, image: &Tensor<T>) -> Result<ForwardVars> {
        let img = tape.constant(image.clone());
        let (s4, features) = self.backbone(tape, p, img)?;
        let f_h = self.high_res_feature(tape, p, s4, &features)?;
        let mut stages = Vec::with_capacity(features.len());
        for &x in &features {
            let (l_th, l_st) = self.position_head(tape, p, x)?;
            let g = self.kernel_head(tape, p, x)?;
            stages.push(StageVars { l_th, l_st, g });
        }
        let f_e = self.feature_encoder(tape, p, f_h)?;
        Ok(ForwardVars {
            stages,
            features,
            f_h,
            f_e,
        })
    }

    /// Forward pass returning values only.
    pub fn forward<T: Scalar>(&self, p: &ParamSet<T>, image: &Tensor<T>) -> Result<ModelOutput<T>> {
        let mut tape = Tape::new();
        let vars = self.forward_tape(&mut tape, p, image)?;
        Ok(Self::collect(&tape, &vars))
    }

    pub fn collect<T: Scalar>(tape: &Tape<T>, vars: &ForwardVars) -> ModelOutput<T> {
        ModelOutput {
            stages: vars
                .stages
                .iter()
                .map(|s| StageOutput {
                    l_th: tape.value(s.l_th).clone(),
                    l_st: tape.value(s.l_st).clone(),
                    g: tape.value(s.g).clone(),
                })
                .collect(),
            f_e: tape.value(vars.f_e).clone(),
        }
    }
}
