//! Encoder-decoder pixel-embedding network.
//!
//! Encoder level `l` runs conv3×3 → conv3×3 → ReLU with `base · 2^l` filters,
//! followed by 2×2 max-pooling. Each decoder level applies a 3×3
//! up-convolution at the coarse scale, bilinear 2× upsampling, concatenation
//! with the encoder skip, then conv3×3 → conv3×3 → ReLU. A 1×1 convolution
//! produces `K` logits, and the output activation (softplus positivity then
//! power-normalisation) turns them into points on the simplex.

mod checkpoint;
pub mod ops;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activation::{activate, EmbeddingMap};
use crate::error::{Error, Result};
use crate::imgdata::RawImage;
use ops::{
    concat, conv_backward, conv_forward, maxpool2, maxpool2_backward, relu, relu_backward, split,
    upsample2, upsample2_backward, Tensor,
};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub base_filters: usize,
    /// Number of resolution levels, including the bottleneck.
    pub depth: usize,
    pub out_channels: usize,
    /// `(height, width)`.
    pub input_size: (usize, usize),
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            base_filters: 16,
            depth: 5,
            out_channels: 4,
            input_size: (512, 512),
        }
    }
}

impl NetConfig {
    /// Small configuration used for the synthetic benchmark runs.
    pub fn desk() -> Self {
        NetConfig {
            base_filters: 8,
            depth: 4,
            out_channels: 4,
            input_size: (128, 128),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_filters == 0 || self.depth == 0 {
            return Err(Error::Config("base_filters and depth must be positive".into()));
        }
        if self.out_channels < 2 {
            return Err(Error::Config(format!(
                "need at least 2 output channels, got {}",
                self.out_channels
            )));
        }
        let div = 1usize << (self.depth - 1);
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be divisible by {div} for depth {}",
                self.depth
            )));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_filters << level
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Param {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    cin: usize,
    cout: usize,
    k: usize,
    /// index of the weight in the parameter list; the bias follows it
    param: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    enc: Vec<[Conv; 2]>,
    /// `dec[l]` produces decoder output at level `l`: `[up, conv1, conv2]`.
    dec: Vec<[Conv; 3]>,
    head: Conv,
}

impl Layout {
    fn new(cfg: &NetConfig) -> (Self, Vec<(String, Vec<usize>)>) {
        let mut shapes = Vec::new();
        let mut conv = |name: String, cin: usize, cout: usize, k: usize| {
            let param = shapes.len();
            shapes.push((format!("{name}.weight"), vec![cout, cin, k, k]));
            shapes.push((format!("{name}.bias"), vec![cout]));
            Conv { cin, cout, k, param }
        };
        let mut enc = Vec::new();
        for l in 0..cfg.depth {
            let cin = if l == 0 { 1 } else { cfg.channels(l - 1) };
            let c = cfg.channels(l);
            enc.push([
                conv(format!("enc{l}.conv1"), cin, c, 3),
                conv(format!("enc{l}.conv2"), c, c, 3),
            ]);
        }
        let mut dec = Vec::new();
        for l in 0..cfg.depth.saturating_sub(1) {
            let below = cfg.channels(l + 1);
            let c = cfg.channels(l);
            dec.push([
                conv(format!("dec{l}.up"), below, below, 3),
                conv(format!("dec{l}.conv1"), below + c, c, 3),
                conv(format!("dec{l}.conv2"), c, c, 3),
            ]);
        }
        let head = conv("head".into(), cfg.channels(0), cfg.out_channels, 1);
        (Layout { enc, dec, head }, shapes)
    }
}

/// Network parameters plus the configuration and epoch they belong to.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub config: NetConfig,
    pub params: Vec<Param>,
    pub epoch: usize,
    layout: Layout,
}

impl PartialEq for ModelState {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params && self.epoch == other.epoch
    }
}

/// Per-parameter gradient buffers, aligned with [`ModelState::params`].
pub type Grads = Vec<Vec<f32>>;

/// Intermediate activations kept for the backward pass.
pub struct Tape {
    enc_in: Vec<Tensor>,
    enc_mid: Vec<Tensor>,
    enc_out: Vec<Tensor>,
    pool_idx: Vec<Vec<u32>>,
    dec_below: Vec<Tensor>,
    dec_cat: Vec<Tensor>,
    dec_mid: Vec<Tensor>,
    dec_out: Vec<Tensor>,
    head_in: Tensor,
}

/// Fan-in scaled uniform init for kernels, zero biases.
pub fn build(cfg: &NetConfig, seed: u64) -> Result<ModelState> {
    cfg.validate()?;
    let (layout, shapes) = Layout::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = shapes
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = if shape.len() == 4 {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f32;
                let bound = (6.0 / fan_in).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            } else {
                vec![0.0; n]
            };
            Param { name, shape, data }
        })
        .collect();
    Ok(ModelState {
        config: cfg.clone(),
        params,
        epoch: 0,
        layout,
    })
}

impl ModelState {
    pub(crate) fn from_parts(config: NetConfig, params: Vec<Param>, epoch: usize) -> Result<Self> {
        config.validate()?;
        let (layout, shapes) = Layout::new(&config);
        if shapes.len() != params.len()
            || shapes
                .iter()
                .zip(&params)
                .any(|((n, s), p)| *n != p.name || *s != p.shape || p.data.len() != s.iter().product::<usize>())
        {
            return Err(Error::Checkpoint(
                "parameter names or shapes do not match the configuration".into(),
            ));
        }
        Ok(ModelState {
            config,
            params,
            epoch,
            layout,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        self.params.iter().map(|p| vec![0.0; p.len()]).collect()
    }

    fn conv(&self, c: &Conv, x: &Tensor) -> Tensor {
        conv_forward(
            x,
            &self.params[c.param].data,
            &self.params[c.param + 1].data,
            c.cout,
            c.k,
        )
    }

    fn conv_back(&self, c: &Conv, x: &Tensor, dy: &Tensor, grads: &mut Grads, need_dx: bool) -> Option<Tensor> {
        debug_assert_eq!(x.c, c.cin);
        let (gw, gb) = grads.split_at_mut(c.param + 1);
        conv_backward(
            x,
            &self.params[c.param].data,
            c.cout,
            c.k,
            dy,
            &mut gw[c.param],
            &mut gb[0],
            need_dx,
        )
    }

    fn check_input(&self, img: &RawImage) -> Result<()> {
        let (h, w) = self.config.input_size;
        if img.height() != h || img.width() != w {
            return Err(Error::Shape {
                expected: format!("{h}x{w} input"),
                got: format!("{}x{}", img.height(), img.width()),
            });
        }
        Ok(())
    }

    /// Raw logits (`K × H × W`) and the tape needed by [`ModelState::backward`].
    pub fn forward_tape(&self, img: &RawImage) -> Result<(Tensor, Tape)> {
        self.check_input(img)?;
        let depth = self.config.depth;
        let mut x = Tensor {
            c: 1,
            h: img.height(),
            w: img.width(),
            data: img.pixels().to_vec(),
        };
        let mut enc_in = Vec::with_capacity(depth);
        let mut enc_mid = Vec::with_capacity(depth);
        let mut enc_out: Vec<Tensor> = Vec::with_capacity(depth);
        let mut pool_idx = Vec::with_capacity(depth);
        for (l, [c1, c2]) in self.layout.enc.iter().enumerate() {
            let a = self.conv(c1, &x);
            let e = relu(self.conv(c2, &a));
            enc_in.push(x);
            enc_mid.push(a);
            if l + 1 < depth {
                let (p, idx) = maxpool2(&e);
                pool_idx.push(idx);
                x = p;
            } else {
                x = Tensor::zeros(0, 0, 0);
            }
            enc_out.push(e);
        }

        let n_dec = self.layout.dec.len();
        let mut dec_below = vec![Tensor::zeros(0, 0, 0); n_dec];
        let mut dec_cat = vec![Tensor::zeros(0, 0, 0); n_dec];
        let mut dec_mid = vec![Tensor::zeros(0, 0, 0); n_dec];
        let mut dec_out = vec![Tensor::zeros(0, 0, 0); n_dec];
        let mut below = enc_out[depth - 1].clone();
        for l in (0..n_dec).rev() {
            let [up, c1, c2] = &self.layout.dec[l];
            let u = upsample2(&self.conv(up, &below));
            let cat = concat(&u, &enc_out[l]);
            let p = self.conv(c1, &cat);
            let d = relu(self.conv(c2, &p));
            dec_below[l] = below;
            dec_cat[l] = cat;
            dec_mid[l] = p;
            below = d.clone();
            dec_out[l] = d;
        }
        let logits = self.conv(&self.layout.head, &below);
        Ok((
            logits,
            Tape {
                enc_in,
                enc_mid,
                enc_out,
                pool_idx,
                dec_below,
                dec_cat,
                dec_mid,
                dec_out,
                head_in: below,
            },
        ))
    }

    /// Accumulates parameter gradients for `dlogits` (`K × H × W`) into `grads`.
    pub fn backward(&self, tape: &Tape, dlogits: &Tensor, grads: &mut Grads) {
        let depth = self.config.depth;
        let n_dec = self.layout.dec.len();
        let mut d_below = self
            .conv_back(&self.layout.head, &tape.head_in, dlogits, grads, true)
            .expect("input grad requested");
        let mut skip_grads: Vec<Option<Tensor>> = vec![None; depth];
        for l in 0..n_dec {
            let [up, c1, c2] = &self.layout.dec[l];
            let dq = relu_backward(&tape.dec_out[l], d_below);
            let dp = self.conv_back(c2, &tape.dec_mid[l], &dq, grads, true).unwrap();
            let dcat = self.conv_back(c1, &tape.dec_cat[l], &dp, grads, true).unwrap();
            let (du, dskip) = split(dcat, up.cout);
            skip_grads[l] = Some(dskip);
            let dup = upsample2_backward(&du);
            d_below = self.conv_back(up, &tape.dec_below[l], &dup, grads, true).unwrap();
        }
        // d_below now holds the gradient at the bottleneck output
        let mut de = d_below;
        for l in (0..depth).rev() {
            let [c1, c2] = &self.layout.enc[l];
            let db = relu_backward(&tape.enc_out[l], de);
            let da = self.conv_back(c2, &tape.enc_mid[l], &db, grads, true).unwrap();
            let dx = self.conv_back(c1, &tape.enc_in[l], &da, grads, l > 0);
            if l > 0 {
                let prev = &tape.enc_out[l - 1];
                let mut g = maxpool2_backward(&dx.unwrap(), &tape.pool_idx[l - 1], prev.c, prev.h, prev.w);
                if let Some(s) = skip_grads[l - 1].take() {
                    g.add_assign(&s);
                }
                de = g;
            } else {
                break;
            }
        }
    }

    /// Raw logits as a pixel-major embedding map.
    pub fn forward_logits(&self, img: &RawImage) -> Result<EmbeddingMap> {
        let (t, _) = self.forward_tape(img)?;
        Ok(tensor_to_embedding(&t))
    }
}

/// `K × H × W` tensor to pixel-major `H × W × K`.
pub fn tensor_to_embedding(t: &Tensor) -> EmbeddingMap {
    let hw = t.plane();
    let mut values = vec![0.0f64; hw * t.c];
    for c in 0..t.c {
        for (i, &v) in t.data[c * hw..(c + 1) * hw].iter().enumerate() {
            values[i * t.c + c] = v as f64;
        }
    }
    EmbeddingMap::new(t.h, t.w, t.c, values).expect("consistent shape")
}

/// Pixel-major embedding to a `K × H × W` tensor.
pub fn embedding_to_tensor(e: &EmbeddingMap) -> Tensor {
    let (hw, k) = (e.num_pixels(), e.k());
    let mut t = Tensor::zeros(k, e.height(), e.width());
    for (i, px) in e.pixels().enumerate() {
        for (c, &v) in px.iter().enumerate() {
            t.data[c * hw + i] = v as f32;
        }
    }
    t
}

/// Network output after the activation: every pixel lies on the simplex.
pub fn forward(m: &ModelState, img: &RawImage, alpha: f64) -> Result<EmbeddingMap> {
    Ok(activate(&m.forward_logits(img)?, alpha))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetConfig {
        NetConfig {
            base_filters: 2,
            depth: 3,
            out_channels: 4,
            input_size: (8, 8),
        }
    }

    #[test]
    fn rejects_indivisible_sizes() {
        let cfg = NetConfig {
            input_size: (100, 96),
            ..NetConfig::default()
        };
        assert!(matches!(build(&cfg, 0), Err(Error::Config(_))));
        let cfg = NetConfig {
            out_channels: 1,
            ..tiny()
        };
        assert!(build(&cfg, 0).is_err());
    }

    #[test]
    fn shape_mismatch() {
        let m = build(&tiny(), 0).unwrap();
        assert!(matches!(
            forward(&m, &RawImage::zeros(16, 8), 2.0),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn deterministic_init_and_output() {
        let a = build(&tiny(), 7).unwrap();
        let b = build(&tiny(), 7).unwrap();
        assert_eq!(a, b);
        let c = build(&tiny(), 8).unwrap();
        assert_ne!(a.params, c.params);
        let img = RawImage::new(8, 8, (0..64).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        assert_eq!(forward(&a, &img, 4.0).unwrap(), forward(&b, &img, 4.0).unwrap());
    }

    #[test]
    fn output_on_simplex() {
        let m = build(&tiny(), 1).unwrap();
        let img = RawImage::new(8, 8, (0..64).map(|i| (i as f32).cos()).collect()).unwrap();
        let out = forward(&m, &img, 8.0).unwrap();
        assert_eq!((out.height(), out.width(), out.k()), (8, 8, 4));
        for p in out.pixels() {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            assert!(p.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn zero_image_gives_uniform_output() {
        let m = build(&tiny(), 1).unwrap();
        let out = forward(&m, &RawImage::zeros(8, 8), 2.0).unwrap();
        for p in out.pixels() {
            assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-6));
        }
    }

    #[test]
    fn layout_round_trip() {
        let e = EmbeddingMap::new(1, 2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t = embedding_to_tensor(&e);
        assert_eq!(t.data, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(tensor_to_embedding(&t), e);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cfg = tiny();
        let mut m = build(&cfg, 3).unwrap();
        // nonzero biases so ReLUs are not all on the same side
        for p in m.params.iter_mut().filter(|p| p.shape.len() == 1) {
            for (i, v) in p.data.iter_mut().enumerate() {
                *v = 0.05 * ((i % 3) as f32 - 1.0);
            }
        }
        let img = RawImage::new(8, 8, (0..64).map(|i| ((i * 7 % 13) as f32 / 6.0) - 1.0).collect()).unwrap();
        let (out, tape) = m.forward_tape(&img).unwrap();
        let probe: Vec<f32> = (0..out.data.len()).map(|i| ((i * 31 % 17) as f32 / 8.0) - 1.0).collect();
        let dy = Tensor {
            data: probe.clone(),
            ..out.clone()
        };
        let mut grads = m.zero_grads();
        m.backward(&tape, &dy, &mut grads);
        let objective = |m: &ModelState| -> f64 {
            let (o, _) = m.forward_tape(&img).unwrap();
            o.data.iter().zip(&probe).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        let mut checked = 0;
        for pi in 0..m.params.len() {
            for j in [0usize, 5, 11] {
                if j >= m.params[pi].len() {
                    continue;
                }
                let h = 1e-3f32;
                let orig = m.params[pi].data[j];
                m.params[pi].data[j] = orig + h;
                let p = objective(&m);
                m.params[pi].data[j] = orig - h;
                let q = objective(&m);
                m.params[pi].data[j] = orig;
                let num = (p - q) / (2.0 * h as f64);
                let an = grads[pi][j] as f64;
                assert!(
                    (num - an).abs() <= 2e-2 * (1.0 + an.abs()),
                    "{}[{j}]: numeric {num} analytic {an}",
                    m.params[pi].name
                );
                checked += 1;
            }
        }
        assert!(checked > 40);
    }
}
