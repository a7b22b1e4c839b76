//! Two-stage group codec: per-frame spatial encoding, temporal compression
//! of the stacked codes into one latent vector, and the symmetric decoder.
//!
//! The spatial stage is applied to each of the `T` frames with shared
//! weights (the affine analog of running one convolutional encoder per
//! frame); the temporal stage compresses the stacked `T x s` code matrix to
//! a length-`d` latent. The variational variant swaps the single latent head
//! for mean/log-variance heads with the usual reparametrized sampling and a
//! closed-form KL to the standard normal prior.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::rng::SplitRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Codec architecture description.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecConfig {
    pub height: usize,
    pub width: usize,
    /// Frames per group (`T`).
    pub group_len: usize,
    /// Per-frame spatial code length (`s`).
    pub spatial_dim: usize,
    /// Latent code length (`d`).
    pub latent_dim: usize,
    /// Hidden widths of the spatial stage (tanh layers).
    pub spatial_hidden: Vec<usize>,
    /// Hidden widths of the temporal stage (tanh layers).
    pub temporal_hidden: Vec<usize>,
    pub variational: bool,
}

impl CodecConfig {
    /// Desk-scale default: 16x16 frames, groups of 20, latent length 16.
    pub fn desk_scale() -> CodecConfig {
        CodecConfig {
            height: 16,
            width: 16,
            group_len: 20,
            spatial_dim: 32,
            latent_dim: 16,
            spatial_hidden: vec![64],
            temporal_hidden: vec![64],
            variational: false,
        }
    }

    /// Full-scale preset mirroring the published architecture sizes
    /// (192x192 frames, groups of 100, spatial code 256, latent length 64).
    /// Recorded for reference; training it is far beyond desk scale.
    pub fn paper_scale() -> CodecConfig {
        CodecConfig {
            height: 192,
            width: 192,
            group_len: 100,
            spatial_dim: 256,
            latent_dim: 64,
            spatial_hidden: vec![2048, 512],
            temporal_hidden: vec![512],
            variational: false,
        }
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.height,
            self.width,
            self.group_len,
            self.spatial_dim,
            self.latent_dim,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("codec dimensions must be positive: {self:?}")));
        }
        if self.spatial_hidden.iter().chain(&self.temporal_hidden).any(|&d| d == 0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        if self.latent_dim > self.group_len * self.spatial_dim {
            return Err(Error::Config(format!(
                "latent_dim {} exceeds stacked code length {}",
                self.latent_dim,
                self.group_len * self.spatial_dim
            )));
        }
        Ok(())
    }
}

/// One group of `T` consecutive frames for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameGroup {
    pub subject_id: u32,
    pub group_index: usize,
    /// `T` frames, each of shape `[H, W]`.
    pub frames: Vec<Tensor>,
}

impl FrameGroup {
    pub fn new(frames: Vec<Tensor>) -> FrameGroup {
        FrameGroup {
            subject_id: 0,
            group_index: 0,
            frames,
        }
    }

    pub fn with_ids(mut self, subject_id: u32, group_index: usize) -> FrameGroup {
        self.subject_id = subject_id;
        self.group_index = group_index;
        self
    }

    fn check_shape(&self, cfg: &CodecConfig) -> Result<()> {
        if self.frames.len() != cfg.group_len {
            return Err(Error::dim(
                "FrameGroup",
                format!("{} frames", cfg.group_len),
                format!("{}", self.frames.len()),
            ));
        }
        for f in &self.frames {
            if f.shape() != [cfg.height, cfg.width] {
                return Err(Error::dim(
                    "FrameGroup",
                    format!("[{}, {}]", cfg.height, cfg.width),
                    format!("{:?}", f.shape()),
                ));
            }
        }
        Ok(())
    }
}

/// Latent code for one frame group.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub z: Tensor,
    pub group_index: usize,
    pub subject_id: u32,
}

/// Diagonal Gaussian over latent space: mean and log variance.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGaussian {
    pub mu: Tensor,
    pub logvar: Tensor,
}

/// Log-variance head outputs are clamped to this interval so `exp` cannot
/// overflow the KL term.
pub const LOGVAR_CLAMP: f64 = 10.0;

fn uniform_fan_in(rng: &mut SplitRng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (cols as f64).sqrt();
    Tensor::from_fn(vec![rows, cols], |_| rng.uniform_in(-bound, bound))
}

fn init_layer(params: &mut ParamSet, rng: &mut SplitRng, prefix: &str, out_dim: usize, in_dim: usize) {
    let bound = 1.0 / (in_dim as f64).sqrt();
    params.insert(format!("{prefix}.w"), uniform_fan_in(rng, out_dim, in_dim));
    params.insert(
        format!("{prefix}.b"),
        Tensor::from_fn(vec![out_dim], |_| rng.uniform_in(-bound, bound)),
    );
}

/// Initializes all codec parameters with `U(-1/sqrt(fan_in), +1/sqrt(fan_in))`.
pub fn init_codec_params(cfg: &CodecConfig, rng: &mut SplitRng) -> Result<ParamSet> {
    cfg.validate()?;
    let mut params = ParamSet::new();

    let mut widths = vec![cfg.frame_len()];
    widths.extend(&cfg.spatial_hidden);
    widths.push(cfg.spatial_dim);
    for i in 0..widths.len() - 1 {
        init_layer(&mut params, rng, &format!("enc.spatial.{i}"), widths[i + 1], widths[i]);
    }

    let mut trunk = vec![cfg.group_len * cfg.spatial_dim];
    trunk.extend(&cfg.temporal_hidden);
    for i in 0..trunk.len() - 1 {
        init_layer(&mut params, rng, &format!("enc.temporal.{i}"), trunk[i + 1], trunk[i]);
    }
    let trunk_out = *trunk.last().unwrap();
    if cfg.variational {
        init_layer(&mut params, rng, "enc.mu", cfg.latent_dim, trunk_out);
        init_layer(&mut params, rng, "enc.logvar", cfg.latent_dim, trunk_out);
    } else {
        init_layer(&mut params, rng, "enc.z", cfg.latent_dim, trunk_out);
    }

    let mut dec_t = vec![cfg.latent_dim];
    dec_t.extend(cfg.temporal_hidden.iter().rev());
    dec_t.push(cfg.group_len * cfg.spatial_dim);
    for i in 0..dec_t.len() - 1 {
        init_layer(&mut params, rng, &format!("dec.temporal.{i}"), dec_t[i + 1], dec_t[i]);
    }

    let mut dec_s = vec![cfg.spatial_dim];
    dec_s.extend(cfg.spatial_hidden.iter().rev());
    dec_s.push(cfg.frame_len());
    for i in 0..dec_s.len() - 1 {
        init_layer(&mut params, rng, &format!("dec.spatial.{i}"), dec_s[i + 1], dec_s[i]);
    }

    Ok(params)
}

/// Affine chain `prefix.0 .. prefix.{n-1}` with tanh between layers.
fn chain(
    tape: &mut Tape,
    params: &ParamSet,
    prefix: &str,
    n_layers: usize,
    input: Var,
    tanh_last: bool,
) -> Result<Var> {
    let mut x = input;
    for i in 0..n_layers {
        let w = tape.bind(params, &format!("{prefix}.{i}.w"))?;
        let b = tape.bind(params, &format!("{prefix}.{i}.b"))?;
        x = tape.affine(x, w, b)?;
        if i + 1 < n_layers || tanh_last {
            x = tape.tanh(x);
        }
    }
    Ok(x)
}

/// Per-frame spatial encoding on the tape: flattened frame to length-`s`
/// tanh-bounded code. The same representation is used in spatial
/// pre-training and in group encoding.
pub fn spatial_encode_t(tape: &mut Tape, params: &ParamSet, cfg: &CodecConfig, frame: Var) -> Result<Var> {
    let n_layers = cfg.spatial_hidden.len() + 1;
    chain(tape, params, "enc.spatial", n_layers, frame, true)
}

/// Per-frame spatial decoding on the tape: length-`s` code to flattened frame
/// (linear output, frames are unbounded).
pub fn spatial_decode_t(tape: &mut Tape, params: &ParamSet, cfg: &CodecConfig, code: Var) -> Result<Var> {
    let n_layers = cfg.spatial_hidden.len() + 1;
    chain(tape, params, "dec.spatial", n_layers, code, false)
}

fn temporal_trunk_t(tape: &mut Tape, params: &ParamSet, cfg: &CodecConfig, frames: &[Var]) -> Result<Var> {
    if frames.len() != cfg.group_len {
        return Err(Error::dim(
            "encode_group",
            format!("{} frames", cfg.group_len),
            format!("{}", frames.len()),
        ));
    }
    let mut codes = Vec::with_capacity(cfg.group_len);
    for &f in frames {
        if tape.value(f).len() != cfg.frame_len() {
            return Err(Error::dim(
                "encode_group",
                format!("frame of {} values", cfg.frame_len()),
                format!("{:?}", tape.value(f).shape()),
            ));
        }
        codes.push(spatial_encode_t(tape, params, cfg, f)?);
    }
    let stacked = tape.concat(&codes)?;
    let mut x = stacked;
    for i in 0..cfg.temporal_hidden.len() {
        let w = tape.bind(params, &format!("enc.temporal.{i}.w"))?;
        let b = tape.bind(params, &format!("enc.temporal.{i}.b"))?;
        x = tape.affine(x, w, b)?;
        x = tape.tanh(x);
    }
    Ok(x)
}

/// Encoder on the tape: `T` frame vars to a length-`d` latent var.
/// Under a variational config this is the mean head (the deterministic
/// inference path).
pub fn encode_group_t(tape: &mut Tape, params: &ParamSet, cfg: &CodecConfig, frames: &[Var]) -> Result<Var> {
    let trunk = temporal_trunk_t(tape, params, cfg, frames)?;
    let head = if cfg.variational { "enc.mu" } else { "enc.z" };
    let w = tape.bind(params, &format!("{head}.w"))?;
    let b = tape.bind(params, &format!("{head}.b"))?;
    tape.affine(trunk, w, b)
}

/// Variational encoder on the tape: `T` frame vars to `(mu, logvar)` vars,
/// with the log-variance clamped to `[-LOGVAR_CLAMP, LOGVAR_CLAMP]`.
pub fn encode_variational_t(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &CodecConfig,
    frames: &[Var],
) -> Result<(Var, Var)> {
    if !cfg.variational {
        return Err(Error::Config(
            "encode_variational requires a variational codec config".into(),
        ));
    }
    let trunk = temporal_trunk_t(tape, params, cfg, frames)?;
    let wm = tape.bind(params, "enc.mu.w")?;
    let bm = tape.bind(params, "enc.mu.b")?;
    let mu = tape.affine(trunk, wm, bm)?;
    let wv = tape.bind(params, "enc.logvar.w")?;
    let bv = tape.bind(params, "enc.logvar.b")?;
    let raw = tape.affine(trunk, wv, bv)?;
    let logvar = tape.clamp(raw, -LOGVAR_CLAMP, LOGVAR_CLAMP);
    Ok((mu, logvar))
}

/// Decoder on the tape: latent var to `T` flattened frame vars.
pub fn decode_group_t(tape: &mut Tape, params: &ParamSet, cfg: &CodecConfig, z: Var) -> Result<Vec<Var>> {
    if tape.value(z).len() != cfg.latent_dim {
        return Err(Error::dim(
            "decode_group",
            format!("latent of length {}", cfg.latent_dim),
            format!("{:?}", tape.value(z).shape()),
        ));
    }
    // Expansion mirrors the encoder: tanh-bounded spatial codes feed the
    // per-frame decoder.
    let n_layers = cfg.temporal_hidden.len() + 1;
    let expanded = chain(tape, params, "dec.temporal", n_layers, z, true)?;
    let mut frames = Vec::with_capacity(cfg.group_len);
    for t in 0..cfg.group_len {
        let code = tape.slice(expanded, t * cfg.spatial_dim, (t + 1) * cfg.spatial_dim)?;
        frames.push(spatial_decode_t(tape, params, cfg, code)?);
    }
    Ok(frames)
}

/// Reparametrized sample on the tape: `z = mu + exp(0.5 logvar) * eps`.
/// Gradients flow to `mu` and `logvar`; `eps` is a constant draw.
pub fn reparametrize_t(tape: &mut Tape, mu: Var, logvar: Var, eps: &Tensor) -> Result<Var> {
    let half = tape.scale(logvar, 0.5);
    let std = tape.exp(half);
    let eps = tape.constant(eps.clone());
    let scaled = tape.mul(std, eps)?;
    tape.add(mu, scaled)
}

/// Closed-form KL divergence to the standard normal prior on the tape:
/// `0.5 * sum(exp(logvar) + mu^2 - 1 - logvar)`.
pub fn kl_to_standard_normal_t(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
    let var = tape.exp(logvar);
    let mu_sq = tape.mul(mu, mu)?;
    let sum = tape.add(var, mu_sq)?;
    let sum = tape.add_scaled(sum, logvar, -1.0)?;
    let sum = tape.add_const(sum, -1.0);
    let total = tape.sum(sum);
    Ok(tape.scale(total, 0.5))
}

fn frame_vars(tape: &mut Tape, frames: &FrameGroup) -> Vec<Var> {
    frames
        .frames
        .iter()
        .map(|f| tape.constant(f.clone()))
        .collect()
}

/// Encodes one frame group into its latent code.
pub fn encode_group(frames: &FrameGroup, params: &ParamSet, cfg: &CodecConfig) -> Result<LatentCode> {
    frames.check_shape(cfg)?;
    let mut tape = Tape::new();
    let vars = frame_vars(&mut tape, frames);
    let z = encode_group_t(&mut tape, params, cfg, &vars)?;
    Ok(LatentCode {
        z: tape.value(z).clone(),
        group_index: frames.group_index,
        subject_id: frames.subject_id,
    })
}

/// Decodes a latent code back to a frame group of shape `T x H x W`.
pub fn decode_group(z: &LatentCode, params: &ParamSet, cfg: &CodecConfig) -> Result<FrameGroup> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.z.clone());
    let frame_vars = decode_group_t(&mut tape, params, cfg, zv)?;
    let frames = frame_vars
        .iter()
        .map(|&v| tape.value(v).reshape(vec![cfg.height, cfg.width]))
        .collect::<Result<Vec<_>>>()?;
    Ok(FrameGroup {
        subject_id: z.subject_id,
        group_index: z.group_index,
        frames,
    })
}

/// Encodes one frame group into a latent Gaussian (variational path).
pub fn encode_variational(frames: &FrameGroup, params: &ParamSet, cfg: &CodecConfig) -> Result<LatentGaussian> {
    frames.check_shape(cfg)?;
    let mut tape = Tape::new();
    let vars = frame_vars(&mut tape, frames);
    let (mu, logvar) = encode_variational_t(&mut tape, params, cfg, &vars)?;
    Ok(LatentGaussian {
        mu: tape.value(mu).clone(),
        logvar: tape.value(logvar).clone(),
    })
}

/// Samples `z = mu + exp(0.5 logvar) * eps` with `eps ~ N(0, I)` from `rng`.
pub fn reparametrize(g: &LatentGaussian, rng: &mut SplitRng) -> Result<Tensor> {
    if g.mu.shape() != g.logvar.shape() {
        return Err(Error::dim(
            "reparametrize",
            format!("{:?}", g.mu.shape()),
            format!("{:?}", g.logvar.shape()),
        ));
    }
    let eps = Tensor::new_unchecked(g.mu.shape().to_vec(), rng.normal_vec(g.mu.len()));
    let std = g.logvar.map(|lv| (0.5 * lv).exp());
    let scaled = std.zip_map(&eps, |s, e| s * e)?;
    g.mu.add(&scaled)
}

/// Closed-form KL divergence of a latent Gaussian to the standard normal.
pub fn kl_to_standard_normal(g: &LatentGaussian) -> Result<f64> {
    if g.mu.shape() != g.logvar.shape() {
        return Err(Error::dim(
            "kl_to_standard_normal",
            format!("{:?}", g.mu.shape()),
            format!("{:?}", g.logvar.shape()),
        ));
    }
    let mut total = 0.0;
    for (&m, &lv) in g.mu.data().iter().zip(g.logvar.data()) {
        total += lv.exp() + m * m - 1.0 - lv;
    }
    Ok(0.5 * total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> CodecConfig {
        CodecConfig {
            height: 2,
            width: 2,
            group_len: 2,
            spatial_dim: 3,
            latent_dim: 2,
            spatial_hidden: vec![],
            temporal_hidden: vec![],
            variational: false,
        }
    }

    fn zero_group(cfg: &CodecConfig) -> FrameGroup {
        FrameGroup::new(vec![Tensor::zeros(vec![cfg.height, cfg.width]); cfg.group_len])
    }

    #[test]
    fn zero_frames_through_zero_weights_give_head_bias() {
        let cfg = tiny_cfg();
        let mut rng = SplitRng::new(1);
        let mut params = init_codec_params(&cfg, &mut rng).unwrap();
        // Zero everything, then set the latent head bias.
        for name in params.names().map(String::from).collect::<Vec<_>>() {
            let shape = params.get(&name).unwrap().shape().to_vec();
            params.update(&name, Tensor::zeros(shape)).unwrap();
        }
        params.update("enc.z.b", Tensor::vector(vec![0.25, -0.5])).unwrap();

        let code = encode_group(&zero_group(&cfg), &params, &cfg).unwrap();
        assert_eq!(code.z.data(), &[0.25, -0.5]);
    }

    #[test]
    fn encoding_is_deterministic() {
        let cfg = tiny_cfg();
        let mut rng = SplitRng::new(7);
        let params = init_codec_params(&cfg, &mut rng).unwrap();
        let mut frame_rng = SplitRng::new(8);
        let frames = FrameGroup::new(
            (0..cfg.group_len)
                .map(|_| Tensor::from_fn(vec![2, 2], |_| frame_rng.normal()))
                .collect(),
        );
        let a = encode_group(&frames, &params, &cfg).unwrap();
        let b = encode_group(&frames, &params, &cfg).unwrap();
        assert_eq!(a.z, b.z);
    }

    #[test]
    fn tiny_hand_set_weights_match_manual_forward() {
        // T=2, H=W=2, s=3, d=2, no hidden layers.
        // spatial: code = tanh(Ws f + bs) stacked; temporal head: z = Wz cat + bz.
        let cfg = tiny_cfg();
        let mut params = ParamSet::new();
        let ws = Tensor::from_vec(
            vec![3, 4],
            vec![
                0.1, 0.0, 0.0, 0.0, //
                0.0, 0.2, 0.0, 0.0, //
                0.0, 0.0, 0.3, 0.0,
            ],
        )
        .unwrap();
        let bs = Tensor::vector(vec![0.0, 0.1, -0.1]);
        let wz = Tensor::from_vec(
            vec![2, 6],
            vec![
                1.0, 0.0, 0.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, 0.0, 0.0, 1.0,
            ],
        )
        .unwrap();
        let bz = Tensor::vector(vec![0.05, -0.05]);
        params.insert("enc.spatial.0.w", ws.clone());
        params.insert("enc.spatial.0.b", bs.clone());
        params.insert("enc.z.w", wz);
        params.insert("enc.z.b", bz);

        let f0 = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let f1 = Tensor::from_vec(vec![2, 2], vec![-1.0, 0.5, 0.0, 2.0]).unwrap();
        let frames = FrameGroup::new(vec![f0.clone(), f1.clone()]);

        let manual_code = |f: &Tensor| -> Vec<f64> {
            let pre = ws.matvec(&f.reshape(vec![4]).unwrap()).unwrap();
            pre.add(&bs).unwrap().data().iter().map(|v| v.tanh()).collect()
        };
        let c0 = manual_code(&f0);
        let c1 = manual_code(&f1);
        let expected = [c0[0] + 0.05, c1[2] - 0.05];

        let code = encode_group(&frames, &params, &cfg).unwrap();
        assert!((code.z.data()[0] - expected[0]).abs() < 1e-15);
        assert!((code.z.data()[1] - expected[1]).abs() < 1e-15);
    }

    #[test]
    fn decode_shape_contract() {
        let cfg = tiny_cfg();
        let mut rng = SplitRng::new(3);
        let params = init_codec_params(&cfg, &mut rng).unwrap();
        let z = LatentCode {
            z: Tensor::vector(vec![0.3, -0.2]),
            group_index: 1,
            subject_id: 9,
        };
        let group = decode_group(&z, &params, &cfg).unwrap();
        assert_eq!(group.frames.len(), cfg.group_len);
        for f in &group.frames {
            assert_eq!(f.shape(), [cfg.height, cfg.width]);
        }
        assert_eq!(group.subject_id, 9);
        assert_eq!(group.group_index, 1);
    }

    #[test]
    fn encode_decode_are_shape_inverse() {
        for (sh, th) in [(vec![], vec![]), (vec![5], vec![4]), (vec![6, 5], vec![4, 3])] {
            let cfg = CodecConfig {
                height: 3,
                width: 4,
                group_len: 3,
                spatial_dim: 4,
                latent_dim: 3,
                spatial_hidden: sh,
                temporal_hidden: th,
                variational: false,
            };
            let mut rng = SplitRng::new(11);
            let params = init_codec_params(&cfg, &mut rng).unwrap();
            let mut frame_rng = SplitRng::new(12);
            let frames = FrameGroup::new(
                (0..cfg.group_len)
                    .map(|_| Tensor::from_fn(vec![3, 4], |_| frame_rng.normal()))
                    .collect(),
            );
            let z = encode_group(&frames, &params, &cfg).unwrap();
            let back = decode_group(&z, &params, &cfg).unwrap();
            assert_eq!(back.frames.len(), frames.frames.len());
            for (a, b) in back.frames.iter().zip(&frames.frames) {
                assert_eq!(a.shape(), b.shape());
            }
        }
    }

    #[test]
    fn variational_requires_flag() {
        let cfg = tiny_cfg();
        let mut rng = SplitRng::new(2);
        let params = init_codec_params(&cfg, &mut rng).unwrap();
        let err = encode_variational(&zero_group(&cfg), &params, &cfg).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn zero_initialized_heads_give_standard_gaussian() {
        let mut cfg = tiny_cfg();
        cfg.variational = true;
        let mut rng = SplitRng::new(2);
        let mut params = init_codec_params(&cfg, &mut rng).unwrap();
        for name in ["enc.mu.w", "enc.mu.b", "enc.logvar.w", "enc.logvar.b"] {
            let shape = params.get(name).unwrap().shape().to_vec();
            params.update(name, Tensor::zeros(shape)).unwrap();
        }
        let g = encode_variational(&zero_group(&cfg), &params, &cfg).unwrap();
        assert_eq!(g.mu.data(), &[0.0, 0.0]);
        assert_eq!(g.logvar.data(), &[0.0, 0.0]);
    }

    #[test]
    fn reparametrize_collapses_at_tiny_variance() {
        let g = LatentGaussian {
            mu: Tensor::vector(vec![1.5, -2.0]),
            logvar: Tensor::vector(vec![-60.0, -60.0]),
        };
        let mut rng = SplitRng::new(4);
        let z = reparametrize(&g, &mut rng).unwrap();
        for (zv, mv) in z.data().iter().zip(g.mu.data()) {
            assert!((zv - mv).abs() < 1e-12);
        }
    }

    #[test]
    fn reparametrize_is_seed_deterministic() {
        let g = LatentGaussian {
            mu: Tensor::vector(vec![0.0, 1.0]),
            logvar: Tensor::vector(vec![0.3, -0.2]),
        };
        let a = reparametrize(&g, &mut SplitRng::new(5)).unwrap();
        let b = reparametrize(&g, &mut SplitRng::new(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn reparametrize_moments_match_the_gaussian() {
        let g = LatentGaussian {
            mu: Tensor::vector(vec![0.0]),
            logvar: Tensor::vector(vec![0.0]),
        };
        let mut rng = SplitRng::new(6);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let z = reparametrize(&g, &mut rng).unwrap().item();
            sum += z;
            sum_sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn kl_closed_form_examples() {
        let zero = LatentGaussian {
            mu: Tensor::vector(vec![0.0, 0.0]),
            logvar: Tensor::vector(vec![0.0, 0.0]),
        };
        assert_eq!(kl_to_standard_normal(&zero).unwrap(), 0.0);

        let shifted = LatentGaussian {
            mu: Tensor::vector(vec![1.0]),
            logvar: Tensor::vector(vec![0.0]),
        };
        assert!((kl_to_standard_normal(&shifted).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_is_nonnegative_on_random_inputs() {
        let mut rng = SplitRng::new(9);
        for _ in 0..200 {
            let g = LatentGaussian {
                mu: Tensor::from_fn(vec![4], |_| rng.normal() * 2.0),
                logvar: Tensor::from_fn(vec![4], |_| rng.normal()),
            };
            assert!(kl_to_standard_normal(&g).unwrap() >= 0.0);
        }
    }
}
