//! Adversarial critic: a pluggable scalar-output model over images, a small
//! strided-convolution reference implementation with hand-derived gradients,
//! and the paired generator/discriminator loss terms.
//!
//! The R1 gradient penalty needs second-order information (the derivative of
//! `|grad_X D|^2` with respect to the critic parameters). That is computed
//! forward-over-reverse: the whole forward/backward pipeline is generic over
//! a [`Scalar`] type, and running it on dual numbers whose input tangent is
//! seeded with `v = grad_X D` makes the dual part of every reverse-mode
//! parameter gradient equal to half the R1 parameter gradient.

use std::ops::{Add, Mul, Neg, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::losses::f_logistic;
use super::TrainError;

// ---------------------------------------------------------------------------
// Scalar / Dual

/// Arithmetic interface shared by `f64` and [`Dual`]; everything the critic
/// pipeline needs.
pub trait Scalar:
    Copy
    + std::fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Neg<Output = Self>
{
    /// Additive identity.
    const ZERO: Self;
    /// Multiplicative identity.
    const ONE: Self;
    /// Lift a constant (zero tangent).
    fn from_f64(v: f64) -> Self;
    /// Hyperbolic tangent with tangent propagation.
    fn tanh(self) -> Self;
    /// Value part.
    fn re(self) -> f64;
    /// Tangent part (0 for `f64`).
    fn du(self) -> f64;
}

impl Scalar for f64 {
    const ZERO: f64 = 0.0;
    const ONE: f64 = 1.0;
    fn from_f64(v: f64) -> f64 {
        v
    }
    fn tanh(self) -> f64 {
        f64::tanh(self)
    }
    fn re(self) -> f64 {
        self
    }
    fn du(self) -> f64 {
        0.0
    }
}

/// Forward-mode dual number `re + du * eps` with `eps^2 = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub re: f64,
    pub du: f64,
}

impl Dual {
    pub fn new(re: f64, du: f64) -> Dual {
        Dual { re, du }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.re + o.re, self.du + o.du)
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.re - o.re, self.du - o.du)
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.re * o.re, self.re * o.du + self.du * o.re)
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.du)
    }
}

impl Scalar for Dual {
    const ZERO: Dual = Dual { re: 0.0, du: 0.0 };
    const ONE: Dual = Dual { re: 1.0, du: 0.0 };
    fn from_f64(v: f64) -> Dual {
        Dual::new(v, 0.0)
    }
    fn tanh(self) -> Dual {
        let t = self.re.tanh();
        Dual::new(t, self.du * (1.0 - t * t))
    }
    fn re(self) -> f64 {
        self.re
    }
    fn du(self) -> f64 {
        self.du
    }
}

// ---------------------------------------------------------------------------
// CriticModel trait

/// A differentiable scalar-output critic over fixed-size RGB images
/// (interleaved rows, 3 channels). Object-safe so training code can swap
/// implementations.
pub trait CriticModel {
    /// Expected input dimensions (width, height).
    fn input_dims(&self) -> (usize, usize);
    /// Number of trainable parameters.
    fn param_count(&self) -> usize;
    /// Flat parameter vector.
    fn params(&self) -> Vec<f64>;
    /// Replace all parameters from a flat vector.
    fn set_params(&mut self, flat: &[f64]) -> Result<(), TrainError>;
    /// Critic score for one image.
    fn score(&self, image: &[f64]) -> Result<f64, TrainError>;
    /// Score plus its gradient with respect to the input image.
    fn score_with_input_grad(
        &self,
        image: &[f64],
        width: usize,
        height: usize,
    ) -> Result<(f64, Vec<f64>), TrainError>;
    /// Score plus its gradient with respect to the parameters.
    fn score_with_param_grad(&self, image: &[f64]) -> Result<(f64, Vec<f64>), TrainError>;
    /// R1 penalty `|grad_X D(X)|^2` plus its gradient with respect to the
    /// parameters.
    fn r1_with_param_grad(&self, image: &[f64]) -> Result<(f64, Vec<f64>), TrainError>;
}

// ---------------------------------------------------------------------------
// ConvCritic

const C0: usize = 3;
const C1: usize = 4;
const C2: usize = 8;
const K: usize = 3; // kernel size; stride 2, zero padding 1

/// Output extent of one strided convolution along one axis.
fn conv_out(n: usize) -> usize {
    (n - 1) / 2 + 1
}

/// Reference critic: two 3x3 stride-2 zero-padded convolutions with tanh
/// (3 -> 4 -> 8 channels) followed by a linear head over the flattened
/// feature map. Constructed for a fixed input size.
#[derive(Debug, Clone)]
pub struct ConvCritic {
    width: usize,
    height: usize,
    conv1_w: Vec<f64>, // [C1][C0][K][K]
    conv1_b: Vec<f64>, // [C1]
    conv2_w: Vec<f64>, // [C2][C1][K][K]
    conv2_b: Vec<f64>, // [C2]
    head_w: Vec<f64>,  // [C2 * w2 * h2]
    head_b: f64,
}

/// Per-layer spatial extents for one input size.
#[derive(Debug, Clone, Copy)]
struct Dims {
    w0: usize,
    h0: usize,
    w1: usize,
    h1: usize,
    w2: usize,
    h2: usize,
}

impl Dims {
    fn of(width: usize, height: usize) -> Dims {
        let (w1, h1) = (conv_out(width), conv_out(height));
        let (w2, h2) = (conv_out(w1), conv_out(h1));
        Dims { w0: width, h0: height, w1, h1, w2, h2 }
    }

    fn feat_len(&self) -> usize {
        C2 * self.w2 * self.h2
    }
}

/// Parameters lifted into the scalar type of one pipeline run.
struct Lifted<S> {
    conv1_w: Vec<S>,
    conv1_b: Vec<S>,
    conv2_w: Vec<S>,
    conv2_b: Vec<S>,
    head_w: Vec<S>,
    head_b: S,
}

/// Saved forward state: channel-major input planes and post-tanh activations.
struct Acts<S> {
    planes0: Vec<S>,
    act1: Vec<S>,
    act2: Vec<S>,
}

fn lift<S: Scalar>(v: &[f64]) -> Vec<S> {
    v.iter().map(|&x| S::from_f64(x)).collect()
}

/// One strided convolution producing pre-activation planes.
#[allow(clippy::too_many_arguments)]
fn conv_forward<S: Scalar>(
    input: &[S],
    in_w: usize,
    in_h: usize,
    in_ch: usize,
    out_ch: usize,
    weights: &[S],
    bias: &[S],
    out_w: usize,
    out_h: usize,
) -> Vec<S> {
    let mut out = vec![S::ZERO; out_ch * out_w * out_h];
    for oc in 0..out_ch {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = bias[oc];
                for ic in 0..in_ch {
                    for ky in 0..K {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy >= in_h as isize {
                            continue;
                        }
                        for kx in 0..K {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix < 0 || ix >= in_w as isize {
                                continue;
                            }
                            let w = weights[((oc * in_ch + ic) * K + ky) * K + kx];
                            let v = input[(ic * in_h + iy as usize) * in_w + ix as usize];
                            acc = acc + w * v;
                        }
                    }
                }
                out[(oc * out_h + oy) * out_w + ox] = acc;
            }
        }
    }
    out
}

/// Reverse pass of one strided convolution. `d_pre` is the gradient at the
/// pre-activation output; returns gradients for weights, bias, and input.
#[allow(clippy::too_many_arguments)]
fn conv_backward<S: Scalar>(
    d_pre: &[S],
    input: &[S],
    in_w: usize,
    in_h: usize,
    in_ch: usize,
    out_ch: usize,
    weights: &[S],
    out_w: usize,
    out_h: usize,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let mut d_w = vec![S::ZERO; weights.len()];
    let mut d_b = vec![S::ZERO; out_ch];
    let mut d_in = vec![S::ZERO; input.len()];
    for oc in 0..out_ch {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let g = d_pre[(oc * out_h + oy) * out_w + ox];
                d_b[oc] = d_b[oc] + g;
                for ic in 0..in_ch {
                    for ky in 0..K {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy >= in_h as isize {
                            continue;
                        }
                        for kx in 0..K {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix < 0 || ix >= in_w as isize {
                                continue;
                            }
                            let widx = ((oc * in_ch + ic) * K + ky) * K + kx;
                            let iidx = (ic * in_h + iy as usize) * in_w + ix as usize;
                            d_w[widx] = d_w[widx] + g * input[iidx];
                            d_in[iidx] = d_in[iidx] + weights[widx] * g;
                        }
                    }
                }
            }
        }
    }
    (d_w, d_b, d_in)
}

impl ConvCritic {
    /// Random initialization (uniform `+-sqrt(3 / fan_in)` weights, zero
    /// biases), deterministic in the seed.
    pub fn random(width: usize, height: usize, seed: u64) -> ConvCritic {
        assert!(width > 0 && height > 0, "critic input must be non-empty");
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x6372_6974);
        let dims = Dims::of(width, height);
        let mut init = |n: usize, fan_in: usize| -> Vec<f64> {
            let bound = (3.0 / fan_in as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        ConvCritic {
            width,
            height,
            conv1_w: init(C1 * C0 * K * K, C0 * K * K),
            conv1_b: vec![0.0; C1],
            conv2_w: init(C2 * C1 * K * K, C1 * K * K),
            conv2_b: vec![0.0; C2],
            head_w: init(dims.feat_len(), dims.feat_len()),
            head_b: 0.0,
        }
    }

    /// All-zero critic (scores every image 0); useful as a neutral starting
    /// point and in tests.
    pub fn zeros(width: usize, height: usize) -> ConvCritic {
        let mut c = ConvCritic::random(width, height, 0);
        let n = c.param_count();
        c.set_params(&vec![0.0; n]).expect("zero vector has the right length");
        c
    }

    fn dims(&self) -> Dims {
        Dims::of(self.width, self.height)
    }

    fn lifted<S: Scalar>(&self) -> Lifted<S> {
        Lifted {
            conv1_w: lift(&self.conv1_w),
            conv1_b: lift(&self.conv1_b),
            conv2_w: lift(&self.conv2_w),
            conv2_b: lift(&self.conv2_b),
            head_w: lift(&self.head_w),
            head_b: S::from_f64(self.head_b),
        }
    }

    fn check_image(&self, image: &[f64]) -> Result<(), TrainError> {
        let want = C0 * self.width * self.height;
        if image.len() != want {
            return Err(TrainError::Shape(format!(
                "critic expects a {}x{} rgb image ({} values), got {}",
                self.width,
                self.height,
                want,
                image.len()
            )));
        }
        Ok(())
    }

    /// Interleaved rgb rows -> channel-major planes.
    fn to_planes<S: Scalar>(&self, image: &[S]) -> Vec<S> {
        let (w, h) = (self.width, self.height);
        let mut planes = vec![S::ZERO; C0 * w * h];
        for y in 0..h {
            for x in 0..w {
                for c in 0..C0 {
                    planes[(c * h + y) * w + x] = image[C0 * (y * w + x) + c];
                }
            }
        }
        planes
    }

    fn forward_s<S: Scalar>(&self, p: &Lifted<S>, image: &[S]) -> (S, Acts<S>) {
        let d = self.dims();
        let planes0 = self.to_planes(image);
        let pre1 =
            conv_forward(&planes0, d.w0, d.h0, C0, C1, &p.conv1_w, &p.conv1_b, d.w1, d.h1);
        let act1: Vec<S> = pre1.iter().map(|v| v.tanh()).collect();
        let pre2 = conv_forward(&act1, d.w1, d.h1, C1, C2, &p.conv2_w, &p.conv2_b, d.w2, d.h2);
        let act2: Vec<S> = pre2.iter().map(|v| v.tanh()).collect();
        let mut score = p.head_b;
        for (w, a) in p.head_w.iter().zip(&act2) {
            score = score + *w * *a;
        }
        (score, Acts { planes0, act1, act2 })
    }

    /// Reverse pass from `d_score = 1`; returns (flat parameter gradients in
    /// `params()` order, input gradient in interleaved rgb layout).
    fn backward_s<S: Scalar>(&self, p: &Lifted<S>, acts: &Acts<S>) -> (Vec<S>, Vec<S>) {
        let d = self.dims();
        // Head.
        let d_head_w: Vec<S> = acts.act2.clone();
        let d_head_b = S::ONE;
        let d_act2: Vec<S> = p.head_w.clone();
        // tanh of layer 2.
        let d_pre2: Vec<S> = d_act2
            .iter()
            .zip(&acts.act2)
            .map(|(g, t)| *g * (S::ONE - *t * *t))
            .collect();
        let (d_c2w, d_c2b, d_act1) =
            conv_backward(&d_pre2, &acts.act1, d.w1, d.h1, C1, C2, &p.conv2_w, d.w2, d.h2);
        // tanh of layer 1.
        let d_pre1: Vec<S> = d_act1
            .iter()
            .zip(&acts.act1)
            .map(|(g, t)| *g * (S::ONE - *t * *t))
            .collect();
        let (d_c1w, d_c1b, d_planes0) =
            conv_backward(&d_pre1, &acts.planes0, d.w0, d.h0, C0, C1, &p.conv1_w, d.w1, d.h1);

        let mut flat =
            Vec::with_capacity(d_c1w.len() + d_c1b.len() + d_c2w.len() + d_c2b.len() + d_head_w.len() + 1);
        flat.extend_from_slice(&d_c1w);
        flat.extend_from_slice(&d_c1b);
        flat.extend_from_slice(&d_c2w);
        flat.extend_from_slice(&d_c2b);
        flat.extend_from_slice(&d_head_w);
        flat.push(d_head_b);

        // Planes back to interleaved rgb.
        let (w, h) = (self.width, self.height);
        let mut d_image = vec![S::ZERO; C0 * w * h];
        for y in 0..h {
            for x in 0..w {
                for c in 0..C0 {
                    d_image[C0 * (y * w + x) + c] = d_planes0[(c * h + y) * w + x];
                }
            }
        }
        (flat, d_image)
    }
}

impl CriticModel for ConvCritic {
    fn input_dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    fn param_count(&self) -> usize {
        self.conv1_w.len()
            + self.conv1_b.len()
            + self.conv2_w.len()
            + self.conv2_b.len()
            + self.head_w.len()
            + 1
    }

    fn params(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        flat.extend_from_slice(&self.conv1_w);
        flat.extend_from_slice(&self.conv1_b);
        flat.extend_from_slice(&self.conv2_w);
        flat.extend_from_slice(&self.conv2_b);
        flat.extend_from_slice(&self.head_w);
        flat.push(self.head_b);
        flat
    }

    fn set_params(&mut self, flat: &[f64]) -> Result<(), TrainError> {
        if flat.len() != self.param_count() {
            return Err(TrainError::Shape(format!(
                "critic has {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut cursor = 0;
        let take = |dst: &mut [f64], cursor: &mut usize| {
            dst.copy_from_slice(&flat[*cursor..*cursor + dst.len()]);
            *cursor += dst.len();
        };
        take(&mut self.conv1_w, &mut cursor);
        take(&mut self.conv1_b, &mut cursor);
        take(&mut self.conv2_w, &mut cursor);
        take(&mut self.conv2_b, &mut cursor);
        take(&mut self.head_w, &mut cursor);
        self.head_b = flat[cursor];
        Ok(())
    }

    fn score(&self, image: &[f64]) -> Result<f64, TrainError> {
        self.check_image(image)?;
        let p = self.lifted::<f64>();
        Ok(self.forward_s(&p, image).0)
    }

    fn score_with_input_grad(
        &self,
        image: &[f64],
        width: usize,
        height: usize,
    ) -> Result<(f64, Vec<f64>), TrainError> {
        if (width, height) != (self.width, self.height) {
            return Err(TrainError::Shape(format!(
                "critic built for {}x{}, image is {}x{}",
                self.width, self.height, width, height
            )));
        }
        self.check_image(image)?;
        let p = self.lifted::<f64>();
        let (score, acts) = self.forward_s(&p, image);
        let (_, d_image) = self.backward_s(&p, &acts);
        Ok((score, d_image))
    }

    fn score_with_param_grad(&self, image: &[f64]) -> Result<(f64, Vec<f64>), TrainError> {
        self.check_image(image)?;
        let p = self.lifted::<f64>();
        let (score, acts) = self.forward_s(&p, image);
        let (flat, _) = self.backward_s(&p, &acts);
        Ok((score, flat))
    }

    fn r1_with_param_grad(&self, image: &[f64]) -> Result<(f64, Vec<f64>), TrainError> {
        self.check_image(image)?;
        // First pass in plain f64: v = grad_X D.
        let p = self.lifted::<f64>();
        let (_, acts) = self.forward_s(&p, image);
        let (_, v) = self.backward_s(&p, &acts);
        let r1: f64 = v.iter().map(|g| g * g).sum();

        // Dual pass with the input tangent seeded to v. The dual part of the
        // reverse-mode parameter gradient is then d/d_eps grad_theta D(X + eps v),
        // which is half of dR1/d_theta.
        let pd = self.lifted::<Dual>();
        let image_d: Vec<Dual> =
            image.iter().zip(&v).map(|(&x, &t)| Dual::new(x, t)).collect();
        let (score_d, acts_d) = self.forward_s(&pd, &image_d);
        let (flat_d, _) = self.backward_s(&pd, &acts_d);
        // Free consistency check: the dual part of the score is v . grad_X D = R1.
        debug_assert!(
            (score_d.du - r1).abs() <= 1e-9 * r1.abs().max(1.0),
            "dual score {} disagrees with |grad|^2 {}",
            score_d.du,
            r1
        );
        let d_r1: Vec<f64> = flat_d.iter().map(|g| 2.0 * g.du).collect();
        Ok((r1, d_r1))
    }
}

// ---------------------------------------------------------------------------
// LinearCritic

/// Critic `D(X) = <k, X> + b`; its R1 penalty is `|k|^2` in closed form,
/// which pins the regularizer's semantics in tests.
#[derive(Debug, Clone)]
pub struct LinearCritic {
    width: usize,
    height: usize,
    /// One weight per image entry.
    pub k: Vec<f64>,
    /// Scalar offset.
    pub b: f64,
}

impl LinearCritic {
    pub fn new(width: usize, height: usize, k: Vec<f64>, b: f64) -> Result<LinearCritic, TrainError> {
        if k.len() != C0 * width * height {
            return Err(TrainError::Shape(format!(
                "linear critic for {}x{} needs {} weights, got {}",
                width,
                height,
                C0 * width * height,
                k.len()
            )));
        }
        Ok(LinearCritic { width, height, k, b })
    }

    /// Deterministic random weights, scaled so scores stay O(1) on unit-range
    /// images.
    pub fn random(width: usize, height: usize, seed: u64) -> LinearCritic {
        let n = C0 * width * height;
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x6c69_6e63);
        let bound = (3.0 / n as f64).sqrt();
        let k = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        LinearCritic { width, height, k, b: rng.gen_range(-0.1..0.1) }
    }

    fn check_image(&self, image: &[f64]) -> Result<(), TrainError> {
        if image.len() != self.k.len() {
            return Err(TrainError::Shape(format!(
                "linear critic expects {} values, got {}",
                self.k.len(),
                image.len()
            )));
        }
        Ok(())
    }
}

impl CriticModel for LinearCritic {
    fn input_dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    fn param_count(&self) -> usize {
        self.k.len() + 1
    }

    fn params(&self) -> Vec<f64> {
        let mut flat = self.k.clone();
        flat.push(self.b);
        flat
    }

    fn set_params(&mut self, flat: &[f64]) -> Result<(), TrainError> {
        if flat.len() != self.param_count() {
            return Err(TrainError::Shape(format!(
                "linear critic has {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        self.k.copy_from_slice(&flat[..flat.len() - 1]);
        self.b = flat[flat.len() - 1];
        Ok(())
    }

    fn score(&self, image: &[f64]) -> Result<f64, TrainError> {
        self.check_image(image)?;
        Ok(self.b + self.k.iter().zip(image).map(|(k, x)| k * x).sum::<f64>())
    }

    fn score_with_input_grad(
        &self,
        image: &[f64],
        width: usize,
        height: usize,
    ) -> Result<(f64, Vec<f64>), TrainError> {
        if (width, height) != (self.width, self.height) {
            return Err(TrainError::Shape(format!(
                "linear critic built for {}x{}, image is {}x{}",
                self.width, self.height, width, height
            )));
        }
        Ok((self.score(image)?, self.k.clone()))
    }

    fn score_with_param_grad(&self, image: &[f64]) -> Result<(f64, Vec<f64>), TrainError> {
        let score = self.score(image)?;
        let mut flat = image.to_vec();
        flat.push(1.0);
        Ok((score, flat))
    }

    fn r1_with_param_grad(&self, image: &[f64]) -> Result<(f64, Vec<f64>), TrainError> {
        self.check_image(image)?;
        let r1 = self.k.iter().map(|k| k * k).sum();
        let mut d_r1: Vec<f64> = self.k.iter().map(|k| 2.0 * k).collect();
        d_r1.push(0.0); // bias does not enter grad_X D
        Ok((r1, d_r1))
    }
}

// ---------------------------------------------------------------------------
// Paired loss terms

/// Per-batch values of the adversarial objective. All terms are means over
/// their batch.
#[derive(Debug, Clone, Copy)]
pub struct DiscLosses {
    /// Generator term `f(D(rendered))` (the generator pushes this up).
    pub gen_term: f64,
    /// Real half of the discriminator objective, `f(-D(X))`.
    pub disc_real_term: f64,
    /// Fake half of the discriminator objective, `f(D(rendered))`.
    pub disc_fake_term: f64,
    /// Unweighted R1 penalty on real inputs, `|grad_X D(X)|^2`.
    pub r1_penalty: f64,
    /// `disc_real_term + disc_fake_term + lambda_reg * r1_penalty`.
    pub disc_total: f64,
}

/// The generator and discriminator terms over a batch of rendered and real
/// images, with the R1 penalty evaluated on the real inputs.
pub fn loss_disc(
    critic: &dyn CriticModel,
    rendered: &[Vec<f64>],
    real: &[Vec<f64>],
    lambda_reg: f64,
) -> Result<DiscLosses, TrainError> {
    if rendered.is_empty() || real.is_empty() {
        return Err(TrainError::Invalid("loss_disc: empty batch".into()));
    }
    let mut gen_term = 0.0;
    for img in rendered {
        gen_term += f_logistic(critic.score(img)?).0;
    }
    gen_term /= rendered.len() as f64;
    let disc_fake_term = gen_term;

    let mut disc_real_term = 0.0;
    let mut r1_penalty = 0.0;
    for img in real {
        disc_real_term += f_logistic(-critic.score(img)?).0;
        let (w, h) = critic.input_dims();
        let (_, g) = critic.score_with_input_grad(img, w, h)?;
        r1_penalty += g.iter().map(|v| v * v).sum::<f64>();
    }
    disc_real_term /= real.len() as f64;
    r1_penalty /= real.len() as f64;

    Ok(DiscLosses {
        gen_term,
        disc_real_term,
        disc_fake_term,
        r1_penalty,
        disc_total: disc_real_term + disc_fake_term + lambda_reg * r1_penalty,
    })
}

/// `loss_disc` plus the gradient of `disc_total` with respect to the critic
/// parameters, for critic updates.
pub fn loss_disc_with_param_grad(
    critic: &dyn CriticModel,
    rendered: &[Vec<f64>],
    real: &[Vec<f64>],
    lambda_reg: f64,
) -> Result<(DiscLosses, Vec<f64>), TrainError> {
    let losses = loss_disc(critic, rendered, real, lambda_reg)?;
    let mut grad = vec![0.0; critic.param_count()];

    let inv_fake = 1.0 / rendered.len() as f64;
    for img in rendered {
        let (score, d_theta) = critic.score_with_param_grad(img)?;
        let (_, fp) = f_logistic(score);
        for (g, d) in grad.iter_mut().zip(&d_theta) {
            *g += inv_fake * fp * d;
        }
    }

    let inv_real = 1.0 / real.len() as f64;
    for img in real {
        let (score, d_theta) = critic.score_with_param_grad(img)?;
        let (_, fp) = f_logistic(-score);
        for (g, d) in grad.iter_mut().zip(&d_theta) {
            *g += inv_real * -fp * d;
        }
        let (_, d_r1) = critic.r1_with_param_grad(img)?;
        for (g, d) in grad.iter_mut().zip(&d_r1) {
            *g += inv_real * lambda_reg * d;
        }
    }

    Ok((losses, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn random_image(rng: &mut ChaCha20Rng, w: usize, h: usize) -> Vec<f64> {
        (0..C0 * w * h).map(|_| rng.gen_range(0.0..1.0)).collect()
    }

    #[test]
    fn conv_critic_is_deterministic_in_seed() {
        let a = ConvCritic::random(6, 5, 7);
        let b = ConvCritic::random(6, 5, 7);
        assert_eq!(a.params(), b.params());
        let c = ConvCritic::random(6, 5, 8);
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn zero_critic_scores_everything_zero_and_gives_log2_terms() {
        let critic = ConvCritic::zeros(4, 4);
        let mut r = rng(1);
        let fake = vec![random_image(&mut r, 4, 4), random_image(&mut r, 4, 4)];
        let real = vec![random_image(&mut r, 4, 4)];
        for img in fake.iter().chain(&real) {
            assert_eq!(critic.score(img).unwrap(), 0.0);
        }
        let losses = loss_disc(&critic, &fake, &real, 1e-4).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((losses.gen_term + ln2).abs() < 1e-12);
        assert!((losses.disc_real_term + ln2).abs() < 1e-12);
        assert!((losses.disc_fake_term + ln2).abs() < 1e-12);
        assert_eq!(losses.r1_penalty, 0.0);
        assert!((losses.disc_total + 2.0 * ln2).abs() < 1e-12);
    }

    #[test]
    fn linear_critic_r1_is_norm_of_k_exactly() {
        let mut r = rng(2);
        let critic = LinearCritic::random(5, 4, 11);
        let fake = vec![random_image(&mut r, 5, 4)];
        let real = vec![random_image(&mut r, 5, 4), random_image(&mut r, 5, 4)];
        let lambda = 1e-4;
        let losses = loss_disc(&critic, &fake, &real, lambda).unwrap();
        let k2: f64 = critic.k.iter().map(|k| k * k).sum();
        assert!(
            (losses.r1_penalty - k2).abs() < 1e-10,
            "r1 {} vs |k|^2 {}",
            losses.r1_penalty,
            k2
        );
        let expected_total =
            losses.disc_real_term + losses.disc_fake_term + lambda * k2;
        assert!((losses.disc_total - expected_total).abs() < 1e-10);
    }

    #[test]
    fn conv_critic_input_grad_matches_finite_differences() {
        let critic = ConvCritic::random(6, 5, 3);
        let mut r = rng(3);
        let img = random_image(&mut r, 6, 5);
        let (_, grad) = critic.score_with_input_grad(&img, 6, 5).unwrap();
        let h = 1e-6;
        for i in (0..img.len()).step_by(7) {
            let mut plus = img.clone();
            plus[i] += h;
            let mut minus = img.clone();
            minus[i] -= h;
            let fd = (critic.score(&plus).unwrap() - critic.score(&minus).unwrap()) / (2.0 * h);
            let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-5, "entry {i}: analytic {} vs fd {fd}", grad[i]);
        }
    }

    #[test]
    fn conv_critic_param_grad_matches_finite_differences() {
        let mut critic = ConvCritic::random(6, 5, 4);
        let mut r = rng(4);
        let img = random_image(&mut r, 6, 5);
        let (_, grad) = critic.score_with_param_grad(&img).unwrap();
        let base = critic.params();
        let h = 1e-6;
        for i in (0..base.len()).step_by(13) {
            let mut plus = base.clone();
            plus[i] += h;
            critic.set_params(&plus).unwrap();
            let fp = critic.score(&img).unwrap();
            let mut minus = base.clone();
            minus[i] -= h;
            critic.set_params(&minus).unwrap();
            let fm = critic.score(&img).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-5, "param {i}: analytic {} vs fd {fd}", grad[i]);
        }
        critic.set_params(&base).unwrap();
    }

    #[test]
    fn conv_critic_r1_param_grad_matches_finite_differences() {
        let mut critic = ConvCritic::random(5, 4, 5);
        let mut r = rng(5);
        let img = random_image(&mut r, 5, 4);
        let (r1, d_r1) = critic.r1_with_param_grad(&img).unwrap();
        // The value agrees with the norm of the plain input gradient.
        let (_, g) = critic.score_with_input_grad(&img, 5, 4).unwrap();
        let direct: f64 = g.iter().map(|v| v * v).sum();
        assert!((r1 - direct).abs() < 1e-12 * direct.max(1.0));

        let r1_of = |critic: &ConvCritic| -> f64 {
            let (_, g) = critic.score_with_input_grad(&img, 5, 4).unwrap();
            g.iter().map(|v| v * v).sum()
        };
        let base = critic.params();
        let h = 1e-6;
        for i in (0..base.len()).step_by(17) {
            let mut plus = base.clone();
            plus[i] += h;
            critic.set_params(&plus).unwrap();
            let fp = r1_of(&critic);
            let mut minus = base.clone();
            minus[i] -= h;
            critic.set_params(&minus).unwrap();
            let fm = r1_of(&critic);
            let fd = (fp - fm) / (2.0 * h);
            let rel = (d_r1[i] - fd).abs() / d_r1[i].abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-5, "param {i}: analytic {} vs fd {fd}", d_r1[i]);
        }
        critic.set_params(&base).unwrap();
    }

    #[test]
    fn disc_total_param_grad_matches_finite_differences() {
        let mut critic = ConvCritic::random(4, 4, 6);
        let mut r = rng(6);
        let fake = vec![random_image(&mut r, 4, 4), random_image(&mut r, 4, 4)];
        let real = vec![random_image(&mut r, 4, 4), random_image(&mut r, 4, 4)];
        let lambda = 0.05; // large enough that the R1 path matters in the check
        let (_, grad) = loss_disc_with_param_grad(&critic, &fake, &real, lambda).unwrap();
        let base = critic.params();
        let h = 1e-6;
        for i in (0..base.len()).step_by(19) {
            let mut plus = base.clone();
            plus[i] += h;
            critic.set_params(&plus).unwrap();
            let fp = loss_disc(&critic, &fake, &real, lambda).unwrap().disc_total;
            let mut minus = base.clone();
            minus[i] -= h;
            critic.set_params(&minus).unwrap();
            let fm = loss_disc(&critic, &fake, &real, lambda).unwrap().disc_total;
            let fd = (fp - fm) / (2.0 * h);
            let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-4, "param {i}: analytic {} vs fd {fd}", grad[i]);
        }
        critic.set_params(&base).unwrap();
    }

    #[test]
    fn critic_rejects_wrong_shapes() {
        let critic = ConvCritic::random(4, 4, 1);
        assert!(critic.score(&[0.0; 7]).is_err());
        assert!(critic.score_with_input_grad(&vec![0.0; 48], 5, 4).is_err());
        let mut critic = critic;
        assert!(critic.set_params(&[0.0; 3]).is_err());
        assert!(loss_disc(&critic, &[], &[vec![0.0; 48]], 0.0).is_err());
    }
}
