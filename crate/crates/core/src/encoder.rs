//! Small trainable video/text encoder producing the feature tensors the MReg
//! head consumes: per-frame video features `[I, T, D]`, two-class text
//! features `[I, 2, D]` and per-patch three-class image-text features
//! `[I, T, P, 3, D]`.
//!
//! Pipeline per frame: pixels scaled to `[0, 1]` are cut into a `sqrt(P)` x
//! `sqrt(P)` grid, each patch is linearly embedded, patches are mean-pooled,
//! and one softmax self-attention layer mixes the `T` frames of each clip.
//! The patch-level text features modulate each patch embedding by a learned
//! class embedding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::dataio::InstanceBag;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Feature and input geometry shared by the encoder and the head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    /// Feature width `D`.
    pub d: usize,
    /// Patches per frame `P` (a perfect square).
    pub p: usize,
    /// Instances per bag `I`.
    pub instances: usize,
    /// Frames per instance `T`.
    pub clip_len: usize,
    /// Side of the square resized ROI frame.
    pub image: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            d: 64,
            p: 16,
            instances: 3,
            clip_len: 16,
            image: 32,
        }
    }
}

impl ModelDims {
    pub fn grid(&self) -> usize {
        (self.p as f64).sqrt().round() as usize
    }

    pub fn patch_side(&self) -> usize {
        self.image / self.grid()
    }

    /// Input width of the patch embedding, `3 * side * side`.
    pub fn patch_inputs(&self) -> usize {
        3 * self.patch_side() * self.patch_side()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.p == 0 || self.instances == 0 || self.clip_len == 0 {
            return Err(Error::invalid(format!("model dims must be positive: {self:?}")));
        }
        let g = self.grid();
        if g * g != self.p {
            return Err(Error::invalid(format!("patch count {} is not a perfect square", self.p)));
        }
        if self.image == 0 || self.image % g != 0 {
            return Err(Error::invalid(format!(
                "image side {} is not divisible by the {g}x{g} patch grid",
                self.image
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    /// `[3 * s * s, D]`
    pub patch_weight: Tensor,
    /// `[D]`
    pub patch_bias: Tensor,
    /// `[D, D]`
    pub temporal_mix: Tensor,
    /// `[2, D]`
    pub class2: Tensor,
    /// `[3, D]`
    pub class3: Tensor,
}

/// Uniform on `[-b, b]` with `b = sqrt(6 / (fan_in + fan_out))`; the variance
/// is `2 / (fan_in + fan_out)`.
pub fn scaled_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

pub fn scaled_uniform_variance(fan_in: usize, fan_out: usize) -> f64 {
    2.0 / (fan_in + fan_out) as f64
}

pub fn init_encoder(dims: &ModelDims, seed: u64) -> Result<EncoderParams> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, d) = (dims.patch_inputs(), dims.d);
    Ok(EncoderParams {
        patch_weight: scaled_uniform(&[k, d], k, d, &mut rng),
        patch_bias: Tensor::zeros(&[d]),
        temporal_mix: scaled_uniform(&[d, d], d, d, &mut rng),
        class2: scaled_uniform(&[2, d], d, d, &mut rng),
        class3: scaled_uniform(&[3, d], d, d, &mut rng),
    })
}

impl EncoderParams {
    pub fn named(&self) -> [(&'static str, &Tensor); 5] {
        [
            ("encoder.patch_weight", &self.patch_weight),
            ("encoder.patch_bias", &self.patch_bias),
            ("encoder.temporal_mix", &self.temporal_mix),
            ("encoder.class2", &self.class2),
            ("encoder.class3", &self.class3),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Tensor); 5] {
        [
            ("encoder.patch_weight", &mut self.patch_weight),
            ("encoder.patch_bias", &mut self.patch_bias),
            ("encoder.temporal_mix", &mut self.temporal_mix),
            ("encoder.class2", &mut self.class2),
            ("encoder.class3", &mut self.class3),
        ]
    }

    pub fn check(&self, dims: &ModelDims) -> Result<()> {
        let (k, d) = (dims.patch_inputs(), dims.d);
        let expect: [(&str, &Tensor, Vec<usize>); 5] = [
            ("patch_weight", &self.patch_weight, vec![k, d]),
            ("patch_bias", &self.patch_bias, vec![d]),
            ("temporal_mix", &self.temporal_mix, vec![d, d]),
            ("class2", &self.class2, vec![2, d]),
            ("class3", &self.class3, vec![3, d]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(format!("encoder {name} is {:?}, expected {shape:?}", t.shape())));
            }
        }
        Ok(())
    }
}

/// Graph handles of the encoder parameters.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub patch_weight: Var,
    pub patch_bias: Var,
    pub temporal_mix: Var,
    pub class2: Var,
    pub class3: Var,
}

impl EncoderVars {
    pub fn register(g: &mut Graph, p: &EncoderParams, trainable: bool) -> Self {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        Self {
            patch_weight: leaf(&p.patch_weight),
            patch_bias: leaf(&p.patch_bias),
            temporal_mix: leaf(&p.temporal_mix),
            class2: leaf(&p.class2),
            class3: leaf(&p.class3),
        }
    }

    pub fn all(&self) -> [Var; 5] {
        [self.patch_weight, self.patch_bias, self.temporal_mix, self.class2, self.class3]
    }
}

/// Encoder outputs as values.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    /// `[I, T, D]`
    pub f_video: Tensor,
    /// `[I, 2, D]`
    pub f_text2: Tensor,
    /// `[I, T, P, 3, D]`
    pub f_text3: Tensor,
}

impl FeatureSet {
    pub fn is_finite(&self) -> bool {
        self.f_video.is_finite() && self.f_text2.is_finite() && self.f_text3.is_finite()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FeatureVars {
    pub f_video: Var,
    pub f_text2: Var,
    pub f_text3: Var,
}

/// Rearranges a bag into patch rows `[I * T * P, 3 * s * s]` scaled to `[0, 1]`.
/// Patches are row-major over the grid; inputs are ordered `(channel, dy, dx)`.
pub fn patchify(bag: &InstanceBag, dims: &ModelDims) -> Result<Tensor> {
    if bag.instances != dims.instances
        || bag.clip_len != dims.clip_len
        || bag.height != dims.image
        || bag.width != dims.image
    {
        return Err(Error::shape(format!(
            "bag [{}, {}, 3, {}, {}] does not match model [{}, {}, 3, {}, {}]",
            bag.instances, bag.clip_len, bag.height, bag.width, dims.instances, dims.clip_len, dims.image, dims.image
        )));
    }
    let (g, s, side) = (dims.grid(), dims.patch_side(), dims.image);
    let k = dims.patch_inputs();
    let frames = dims.instances * dims.clip_len;
    let mut out = Vec::with_capacity(frames * dims.p * k);
    for f in 0..frames {
        let frame = bag.frame(f / dims.clip_len, f % dims.clip_len);
        for gy in 0..g {
            for gx in 0..g {
                for c in 0..3 {
                    for dy in 0..s {
                        let row = (c * side + gy * s + dy) * side + gx * s;
                        out.extend(frame[row..row + s].iter().map(|&v| v as f64 / 255.0));
                    }
                }
            }
        }
    }
    Tensor::new(vec![frames * dims.p, k], out)
}

/// Builds the encoder on `g` from pre-cut patch rows.
pub fn encode_graph(g: &mut Graph, patches: Var, vars: &EncoderVars, dims: &ModelDims) -> FeatureVars {
    let (i, t, p, d) = (dims.instances, dims.clip_len, dims.p, dims.d);
    let emb = g.matmul(patches, vars.patch_weight);
    let emb = g.add_bias(emb, vars.patch_bias);
    let emb = g.gelu(emb);
    let emb = g.reshape(emb, &[i, t, p, d]);
    let frame = g.mean_axis(emb, 2);
    let attended = g.temporal_attention(frame);
    let mixed = g.matmul(attended, vars.temporal_mix);
    let f_video = g.add(frame, mixed);
    let copies = vec![vars.class2; i];
    let f_text2 = g.stack(&copies);
    let f_text3 = g.modulate(emb, vars.class3);
    FeatureVars {
        f_video,
        f_text2,
        f_text3,
    }
}

/// Encodes one bag into its feature tensors.
pub fn encode(bag: &InstanceBag, params: &EncoderParams, dims: &ModelDims) -> Result<FeatureSet> {
    dims.validate()?;
    params.check(dims)?;
    let patches = patchify(bag, dims)?;
    let mut g = Graph::new();
    let x = g.constant(patches);
    let vars = EncoderVars::register(&mut g, params, false);
    let f = encode_graph(&mut g, x, &vars, dims);
    Ok(FeatureSet {
        f_video: g.tensor(f.f_video),
        f_text2: g.tensor(f.f_text2),
        f_text3: g.tensor(f.f_text3),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::assert_gradients;

    fn tiny_dims() -> ModelDims {
        ModelDims {
            d: 6,
            p: 4,
            instances: 3,
            clip_len: 4,
            image: 4,
        }
    }

    fn random_bag(dims: &ModelDims, seed: u64) -> InstanceBag {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.instances * dims.clip_len * 3 * dims.image * dims.image;
        InstanceBag {
            instances: dims.instances,
            clip_len: dims.clip_len,
            height: dims.image,
            width: dims.image,
            clips: (0..n).map(|_| rng.gen()).collect(),
            frame_ranges: (0..dims.instances).map(|i| (i * dims.clip_len, (i + 1) * dims.clip_len)).collect(),
            source_id: "r".into(),
        }
    }

    #[test]
    fn init_is_deterministic_with_expected_shapes() {
        let dims = ModelDims::default();
        let a = init_encoder(&dims, 3).unwrap();
        let b = init_encoder(&dims, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class2.shape(), &[2, 64]);
        assert_eq!(a.class3.shape(), &[3, 64]);
        assert_eq!(a.patch_weight.shape(), &[3 * 8 * 8, 64]);
        assert_ne!(a, init_encoder(&dims, 4).unwrap());
    }

    #[test]
    fn non_square_patch_count_is_rejected() {
        let dims = ModelDims { p: 15, ..ModelDims::default() };
        assert!(matches!(init_encoder(&dims, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn init_variance_matches_scheme() {
        // moment check over >= 1e5 entries at the 512-wide, 196-patch geometry
        let dims = ModelDims {
            d: 512,
            p: 196,
            instances: 3,
            clip_len: 16,
            image: 224,
        };
        let p = init_encoder(&dims, 1).unwrap();
        let w = p.patch_weight.data();
        assert!(w.len() >= 100_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let nominal = scaled_uniform_variance(dims.patch_inputs(), dims.d);
        assert!((var / nominal - 1.0).abs() < 0.2, "{var} vs {nominal}");
        assert!(mean.abs() < 0.01 * nominal.sqrt() * 10.0);
    }

    #[test]
    fn zero_pixels_and_bias_give_zero_video_features() {
        let dims = tiny_dims();
        let mut bag = random_bag(&dims, 1);
        bag.clips.iter_mut().for_each(|v| *v = 0);
        let params = init_encoder(&dims, 2).unwrap();
        let f = encode(&bag, &params, &dims).unwrap();
        assert!(f.f_video.data().iter().all(|&v| v == 0.0));
        assert_eq!(f.f_video.shape(), &[3, 4, 6]);
        assert_eq!(f.f_text2.shape(), &[3, 2, 6]);
        assert_eq!(f.f_text3.shape(), &[3, 4, 4, 3, 6]);
    }

    #[test]
    fn text2_is_independent_of_pixels() {
        let dims = tiny_dims();
        let params = init_encoder(&dims, 2).unwrap();
        let a = encode(&random_bag(&dims, 1), &params, &dims).unwrap();
        let b = encode(&random_bag(&dims, 2), &params, &dims).unwrap();
        assert_eq!(a.f_text2, b.f_text2);
        for i in 0..3 {
            assert_eq!(a.f_text2.slice(&[i]), params.class2.data());
        }
    }

    #[test]
    fn clip_permutation_permutes_features() {
        let dims = tiny_dims();
        let params = init_encoder(&dims, 5).unwrap();
        let bag = random_bag(&dims, 9);
        let order = [2, 0, 1];
        let a = encode(&bag, &params, &dims).unwrap();
        let b = encode(&bag.permuted(&order), &params, &dims).unwrap();
        for (new, &old) in order.iter().enumerate() {
            assert_eq!(b.f_video.slice(&[new]), a.f_video.slice(&[old]));
            assert_eq!(b.f_text3.slice(&[new]), a.f_text3.slice(&[old]));
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let dims = tiny_dims();
        let params = init_encoder(&dims, 5).unwrap();
        let other = ModelDims { clip_len: 5, ..dims };
        let bag = random_bag(&other, 1);
        assert!(matches!(encode(&bag, &params, &dims), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let dims = tiny_dims();
        let params = init_encoder(&dims, 5).unwrap();
        let patches = patchify(&random_bag(&dims, 3), &dims).unwrap();
        let mut inputs = vec![patches];
        inputs.extend(params.named().iter().map(|(_, t)| (*t).clone()));
        // nonzero bias so the bias gradient is exercised away from zero
        inputs[2] = crate::testutil::random_tensor(&[dims.d], 77);
        assert_gradients(
            &inputs,
            &|g: &mut Graph, v: &[Var]| {
                let vars = EncoderVars {
                    patch_weight: v[1],
                    patch_bias: v[2],
                    temporal_mix: v[3],
                    class2: v[4],
                    class3: v[5],
                };
                let f = encode_graph(g, v[0], &vars, &dims);
                let a = g.sum_all(f.f_video);
                let sq = g.square(f.f_text3);
                let b = g.mean_all(sq);
                let c = g.sum_all(f.f_text2);
                g.weighted_sum(&[(a, 1.0), (b, 3.0), (c, 0.5)])
            },
            1e-4,
        );
    }
}
