//! Image-space losses and priors, each returning its value together with a
//! hand-derived gradient.
//!
//! Every map in this file from image to loss is piecewise linear (L1 terms
//! composed with linear blurs), so central finite differences match the
//! analytic gradients to roundoff away from the |x| kinks; the tests exploit
//! that.

use crate::geom::Vec3;
use crate::scene::PrimitiveSet;

use super::critic::CriticModel;
use super::{LossWeights, TrainError};

/// Mean absolute error between two equally-shaped images, with the gradient
/// with respect to `rendered`. The subgradient at exact ties is 0.
pub fn loss_rec(rendered: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>), TrainError> {
    if rendered.len() != target.len() {
        return Err(TrainError::Shape(format!(
            "loss_rec: rendered has {} entries, target has {}",
            rendered.len(),
            target.len()
        )));
    }
    if rendered.is_empty() {
        return Err(TrainError::Invalid("loss_rec: empty images".into()));
    }
    let inv_n = 1.0 / rendered.len() as f64;
    let mut sum = 0.0;
    let mut grad = vec![0.0; rendered.len()];
    for (i, (&r, &t)) in rendered.iter().zip(target).enumerate() {
        let d = r - t;
        sum += d.abs();
        grad[i] = sign0(d) * inv_n;
    }
    Ok((sum * inv_n, grad))
}

/// Sign with the subgradient convention sign(0) = 0.
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// The log-sigmoid `f(u) = -ln(1 + exp(-u))` and its derivative
/// `f'(u) = sigmoid(-u)`, both evaluated in overflow-free branches.
pub fn f_logistic(u: f64) -> (f64, f64) {
    if u >= 0.0 {
        let e = (-u).exp(); // <= 1, no overflow
        (-e.ln_1p(), e / (1.0 + e))
    } else {
        let e = u.exp(); // < 1, no overflow
        (u - e.ln_1p(), 1.0 / (1.0 + e))
    }
}

/// Binomial blur kernel (1,4,6,4,1)/16 used by the pyramid.
const KERNEL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

const CHANNELS: usize = 3;

fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Horizontal pass of the separable blur with clamped borders.
fn blur_h(src: &[f64], width: usize, height: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = [0.0; CHANNELS];
            for (k, &kw) in KERNEL.iter().enumerate() {
                let sx = clamp_index(x as isize + k as isize - 2, width);
                let base = CHANNELS * (y * width + sx);
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += kw * src[base + c];
                }
            }
            let base = CHANNELS * (y * width + x);
            out[base..base + CHANNELS].copy_from_slice(&acc);
        }
    }
    out
}

/// Vertical pass of the separable blur with clamped borders.
fn blur_v(src: &[f64], width: usize, height: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = [0.0; CHANNELS];
            for (k, &kw) in KERNEL.iter().enumerate() {
                let sy = clamp_index(y as isize + k as isize - 2, height);
                let base = CHANNELS * (sy * width + x);
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += kw * src[base + c];
                }
            }
            let base = CHANNELS * (y * width + x);
            out[base..base + CHANNELS].copy_from_slice(&acc);
        }
    }
    out
}

/// Adjoint of `blur_h`: scatter-add through the same clamped reads.
fn blur_h_adjoint(d_out: &[f64], width: usize, height: usize) -> Vec<f64> {
    let mut d_in = vec![0.0; d_out.len()];
    for y in 0..height {
        for x in 0..width {
            let base = CHANNELS * (y * width + x);
            for (k, &kw) in KERNEL.iter().enumerate() {
                let sx = clamp_index(x as isize + k as isize - 2, width);
                let sbase = CHANNELS * (y * width + sx);
                for c in 0..CHANNELS {
                    d_in[sbase + c] += kw * d_out[base + c];
                }
            }
        }
    }
    d_in
}

/// Adjoint of `blur_v`.
fn blur_v_adjoint(d_out: &[f64], width: usize, height: usize) -> Vec<f64> {
    let mut d_in = vec![0.0; d_out.len()];
    for y in 0..height {
        for x in 0..width {
            let base = CHANNELS * (y * width + x);
            for (k, &kw) in KERNEL.iter().enumerate() {
                let sy = clamp_index(y as isize + k as isize - 2, height);
                let sbase = CHANNELS * (sy * width + x);
                for c in 0..CHANNELS {
                    d_in[sbase + c] += kw * d_out[base + c];
                }
            }
        }
    }
    d_in
}

/// Keep every even-indexed pixel of a blurred image.
fn decimate(src: &[f64], width: usize, height: usize) -> (Vec<f64>, usize, usize) {
    let w2 = width.div_ceil(2);
    let h2 = height.div_ceil(2);
    let mut out = vec![0.0; CHANNELS * w2 * h2];
    for y2 in 0..h2 {
        for x2 in 0..w2 {
            let src_base = CHANNELS * (2 * y2 * width + 2 * x2);
            let dst_base = CHANNELS * (y2 * w2 + x2);
            out[dst_base..dst_base + CHANNELS]
                .copy_from_slice(&src[src_base..src_base + CHANNELS]);
        }
    }
    (out, w2, h2)
}

/// Adjoint of `decimate`: scatter the coarse gradient back onto the even
/// pixels of the fine grid.
fn decimate_adjoint(
    d_small: &[f64],
    w2: usize,
    h2: usize,
    width: usize,
    height: usize,
) -> Vec<f64> {
    let mut d_in = vec![0.0; CHANNELS * width * height];
    for y2 in 0..h2 {
        for x2 in 0..w2 {
            let src_base = CHANNELS * (y2 * w2 + x2);
            let dst_base = CHANNELS * (2 * y2 * width + 2 * x2);
            for c in 0..CHANNELS {
                d_in[dst_base + c] += d_small[src_base + c];
            }
        }
    }
    d_in
}

/// One pyramid reduction: blur (h then v), then decimate.
fn pyramid_down(src: &[f64], width: usize, height: usize) -> (Vec<f64>, usize, usize) {
    let blurred = blur_v(&blur_h(src, width, height), width, height);
    decimate(&blurred, width, height)
}

/// Adjoint of `pyramid_down`.
fn pyramid_down_adjoint(
    d_small: &[f64],
    w2: usize,
    h2: usize,
    width: usize,
    height: usize,
) -> Vec<f64> {
    let d_blurred = decimate_adjoint(d_small, w2, h2, width, height);
    blur_h_adjoint(&blur_v_adjoint(&d_blurred, width, height), width, height)
}

/// Multi-scale perceptual proxy: the mean over `levels` pyramid levels of the
/// per-level mean absolute error, with the gradient with respect to
/// `rendered` at full resolution. With `levels == 1` this is exactly
/// [`loss_rec`].
pub fn loss_perc_proxy(
    rendered: &[f64],
    target: &[f64],
    width: usize,
    height: usize,
    levels: usize,
) -> Result<(f64, Vec<f64>), TrainError> {
    if rendered.len() != target.len() {
        return Err(TrainError::Shape(format!(
            "loss_perc_proxy: rendered has {} entries, target has {}",
            rendered.len(),
            target.len()
        )));
    }
    if rendered.len() != CHANNELS * width * height || width == 0 || height == 0 {
        return Err(TrainError::Shape(format!(
            "loss_perc_proxy: {}x{} images need {} entries, got {}",
            width,
            height,
            CHANNELS * width * height,
            rendered.len()
        )));
    }
    if levels == 0 {
        return Err(TrainError::Invalid("loss_perc_proxy: levels must be >= 1".into()));
    }

    // Build both pyramids, remembering each level's size.
    let mut r_levels: Vec<(Vec<f64>, usize, usize)> =
        vec![(rendered.to_vec(), width, height)];
    let mut t_levels: Vec<(Vec<f64>, usize, usize)> = vec![(target.to_vec(), width, height)];
    for _ in 1..levels {
        let (r, w, h) = {
            let (ref img, w, h) = r_levels[r_levels.len() - 1];
            pyramid_down(img, w, h)
        };
        r_levels.push((r, w, h));
        let (t, w, h) = {
            let (ref img, w, h) = t_levels[t_levels.len() - 1];
            pyramid_down(img, w, h)
        };
        t_levels.push((t, w, h));
    }

    // Per-level L1 values and local gradients.
    let inv_levels = 1.0 / levels as f64;
    let mut total = 0.0;
    let mut per_level_grads: Vec<Vec<f64>> = Vec::with_capacity(levels);
    for ((r, w, h), (t, _, _)) in r_levels.iter().zip(&t_levels) {
        let inv_n = 1.0 / (CHANNELS * w * h) as f64;
        let mut sum = 0.0;
        let mut g = vec![0.0; r.len()];
        for (i, (&rv, &tv)) in r.iter().zip(t).enumerate() {
            let d = rv - tv;
            sum += d.abs();
            g[i] = sign0(d) * inv_n * inv_levels;
        }
        total += sum * inv_n;
        per_level_grads.push(g);
    }
    total *= inv_levels;

    // Pull the per-level gradients back to full resolution, coarsest first.
    let mut grad = per_level_grads.pop().expect("levels >= 1");
    for level in (0..levels - 1).rev() {
        let (_, w, h) = r_levels[level];
        let (_, w2, h2) = r_levels[level + 1];
        let mut up = pyramid_down_adjoint(&grad, w2, h2, w, h);
        for (u, g) in up.iter_mut().zip(&per_level_grads[level]) {
            *u += g;
        }
        grad = up;
    }

    Ok((total, grad))
}

/// Total primitive volume `sum_k prod_axis s_k,axis` (up to the constant
/// factor 8 of an axis-aligned box), with the per-primitive gradient with
/// respect to the scale vector. Depends only on scales, so it is exactly
/// translation- and rotation-invariant.
pub fn prior_volume(scene: &PrimitiveSet) -> (f64, Vec<Vec3>) {
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(scene.primitives.len());
    for prim in &scene.primitives {
        let s = prim.scale;
        total += s.x * s.y * s.z;
        grads.push(Vec3::new(s.y * s.z, s.x * s.z, s.x * s.y));
    }
    (total, grads)
}

/// Per-term values of the composite objective.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    /// Weighted sum of all enabled terms.
    pub total: f64,
    /// Mean absolute error term.
    pub rec: f64,
    /// Unweighted perceptual-proxy value (0 when its weight is 0).
    pub perc: f64,
    /// Unweighted volume prior (0 when its weight is 0).
    pub vol: f64,
    /// Unweighted adversarial generator term (0 when disabled).
    pub adv: f64,
}

/// The composite training objective
/// `rec + adv + lambda_perc * perc + lambda_vol * vol`, returning per-term
/// values, the gradient with respect to the rendered image, and the gradient
/// with respect to each primitive's scale (from the volume prior).
///
/// Terms with weight zero are skipped entirely, so with all optional weights
/// zero the result equals [`loss_rec`] exactly — value and gradient.
pub fn total_loss(
    rendered: &[f64],
    target: &[f64],
    width: usize,
    height: usize,
    scene: &PrimitiveSet,
    weights: &LossWeights,
    critic: Option<&dyn CriticModel>,
) -> Result<(LossBreakdown, Vec<f64>, Vec<Vec3>), TrainError> {
    if rendered.len() != CHANNELS * width * height {
        return Err(TrainError::Shape(format!(
            "total_loss: {}x{} image needs {} entries, got {}",
            width,
            height,
            CHANNELS * width * height,
            rendered.len()
        )));
    }

    let (rec, mut d_rendered) = loss_rec(rendered, target)?;
    let mut breakdown = LossBreakdown {
        total: rec,
        rec,
        ..LossBreakdown::default()
    };

    if weights.lambda_perc != 0.0 {
        let (perc, d_perc) =
            loss_perc_proxy(rendered, target, width, height, weights.perc_levels)?;
        breakdown.perc = perc;
        breakdown.total += weights.lambda_perc * perc;
        for (d, p) in d_rendered.iter_mut().zip(&d_perc) {
            *d += weights.lambda_perc * p;
        }
    }

    let mut d_scale = vec![Vec3::ZERO; scene.primitives.len()];
    if weights.lambda_vol != 0.0 {
        let (vol, d_vol) = prior_volume(scene);
        breakdown.vol = vol;
        breakdown.total += weights.lambda_vol * vol;
        for (d, v) in d_scale.iter_mut().zip(&d_vol) {
            *d += *v * weights.lambda_vol;
        }
    }

    if weights.adversarial_enabled {
        let critic = critic.ok_or_else(|| {
            TrainError::Invalid("total_loss: adversarial term enabled but no critic given".into())
        })?;
        let (score, d_score_d_image) = critic.score_with_input_grad(rendered, width, height)?;
        // The generator minimizes softplus(-D(rendered)) = -f(D(rendered)).
        let (f_val, f_prime) = f_logistic(score);
        breakdown.adv = -f_val;
        breakdown.total += breakdown.adv;
        for (d, g) in d_rendered.iter_mut().zip(&d_score_d_image) {
            *d += -f_prime * g;
        }
    }

    Ok((breakdown, d_rendered, d_scale))
}

#[cfg(test)]
mod tests {
    use super::super::critic::LinearCritic;
    use super::*;
    use crate::accel::build_bvh;
    use crate::autodiff::backward;
    use crate::geom::{Camera, Rotation};
    use crate::render::{render, RenderOptions};
    use crate::scene::{Payload, Primitive};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn random_image(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()
    }

    fn empty_scene() -> PrimitiveSet {
        PrimitiveSet { primitives: Vec::new(), background: [0.0, 0.0, 0.0] }
    }

    #[test]
    fn loss_rec_identical_images_is_zero() {
        let img = random_image(&mut rng(1), 3 * 4 * 4);
        let (val, grad) = loss_rec(&img, &img).unwrap();
        assert_eq!(val, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn loss_rec_uniform_diff() {
        let a = vec![0.5; 3 * 5 * 2];
        let b = vec![0.4; 3 * 5 * 2];
        let (val, _) = loss_rec(&a, &b).unwrap();
        assert!((val - 0.1).abs() < 1e-12);
    }

    #[test]
    fn loss_rec_gradient_matches_finite_differences() {
        let mut r = rng(2);
        let n = 3 * 4 * 3;
        let rendered = random_image(&mut r, n);
        // Keep all diffs away from the |x| kink so central differences are valid.
        let target: Vec<f64> = rendered
            .iter()
            .map(|v| v + if r.gen_bool(0.5) { 0.2 } else { -0.2 })
            .collect();
        let (_, grad) = loss_rec(&rendered, &target).unwrap();
        let step = 1e-6;
        for i in 0..n {
            let mut plus = rendered.clone();
            plus[i] += step;
            let mut minus = rendered.clone();
            minus[i] -= step;
            let fd = (loss_rec(&plus, &target).unwrap().0 - loss_rec(&minus, &target).unwrap().0)
                / (2.0 * step);
            assert!(
                (grad[i] - fd).abs() < 1e-8,
                "entry {i}: analytic {} vs fd {fd}",
                grad[i]
            );
        }
    }

    #[test]
    fn loss_rec_rejects_shape_mismatch() {
        assert!(loss_rec(&[0.0; 6], &[0.0; 9]).is_err());
    }

    #[test]
    fn f_logistic_closed_forms() {
        let (f0, d0) = f_logistic(0.0);
        assert!((f0 + std::f64::consts::LN_2).abs() < 1e-12);
        assert!((d0 - 0.5).abs() < 1e-12);
        // Stable branch: no catastrophic cancellation at large u.
        let (f100, _) = f_logistic(100.0);
        assert!(f100 > -1e-40 && f100 < 0.0);
        // log-sigmoid identity f(-u) = f(u) - u at u = 3.
        let u = 3.0;
        let (fp, _) = f_logistic(u);
        let (fm, _) = f_logistic(-u);
        assert!((fm - (fp - u)).abs() < 1e-12);
    }

    #[test]
    fn f_logistic_monotone_and_concave() {
        let grid: Vec<f64> = (-60..=60).map(|i| i as f64 * 0.5).collect();
        let vals: Vec<f64> = grid.iter().map(|&u| f_logistic(u).0).collect();
        for w in vals.windows(2) {
            assert!(w[1] > w[0], "not monotone between {} and {}", w[0], w[1]);
        }
        let steps: Vec<f64> = vals.windows(2).map(|w| w[1] - w[0]).collect();
        for w in steps.windows(2) {
            assert!(w[1] < w[0] + 1e-15, "not concave");
        }
        // Derivative matches finite differences on the same grid.
        let h = 1e-6;
        for &u in &grid {
            let fd = (f_logistic(u + h).0 - f_logistic(u - h).0) / (2.0 * h);
            assert!((f_logistic(u).1 - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn perc_proxy_identical_images_is_zero() {
        let img = random_image(&mut rng(3), 3 * 8 * 6);
        let (val, grad) = loss_perc_proxy(&img, &img, 8, 6, 3).unwrap();
        assert_eq!(val, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn perc_proxy_one_level_equals_loss_rec() {
        let mut r = rng(4);
        let a = random_image(&mut r, 3 * 7 * 5);
        let b = random_image(&mut r, 3 * 7 * 5);
        let (v1, g1) = loss_perc_proxy(&a, &b, 7, 5, 1).unwrap();
        let (v2, g2) = loss_rec(&a, &b).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn perc_proxy_gradient_matches_finite_differences() {
        let (w, h) = (6, 5);
        // Per-entry random sign offsets exercise mixed signs, but blurring
        // can average them near an |x| kink at coarse levels, where finite
        // differences straddle two linear pieces. Pick the first seed whose
        // difference image is bounded away from zero at every pyramid level;
        // the loss is then linear across the whole stencil and central
        // differences are exact.
        let mut seed = 5;
        let (rendered, target) = loop {
            let mut r = rng(seed);
            let rendered = random_image(&mut r, 3 * w * h);
            let target: Vec<f64> = rendered
                .iter()
                .map(|v| v + if r.gen_bool(0.5) { 0.3 } else { -0.3 })
                .collect();
            let mut margin = f64::INFINITY;
            let mut diff: Vec<f64> =
                rendered.iter().zip(&target).map(|(a, b)| a - b).collect();
            let (mut lw, mut lh) = (w, h);
            for level in 0.. {
                margin = diff.iter().fold(margin, |m, d| m.min(d.abs()));
                if level == 2 {
                    break;
                }
                let (next, nw, nh) = pyramid_down(&diff, lw, lh);
                diff = next;
                lw = nw;
                lh = nh;
            }
            if margin > 1e-2 {
                break (rendered, target);
            }
            seed += 1;
        };
        let (_, grad) = loss_perc_proxy(&rendered, &target, w, h, 3).unwrap();
        let step = 1e-5;
        for i in 0..rendered.len() {
            let mut plus = rendered.clone();
            plus[i] += step;
            let mut minus = rendered.clone();
            minus[i] -= step;
            let fd = (loss_perc_proxy(&plus, &target, w, h, 3).unwrap().0
                - loss_perc_proxy(&minus, &target, w, h, 3).unwrap().0)
                / (2.0 * step);
            assert!(
                (grad[i] - fd).abs() < 1e-6,
                "entry {i}: analytic {} vs fd {fd}",
                grad[i]
            );
        }
    }

    #[test]
    fn prior_volume_closed_forms() {
        let prim = Primitive::new(
            Vec3::new(3.0, -1.0, 2.0),
            Rotation::from_axis_angle(Vec3::new(0.0, 0.7, 0.0)),
            Vec3::new(1.0, 1.0, 1.0),
            Payload::constant(1, [0.5, 0.5, 0.5], 0.1),
        )
        .unwrap();
        let mut scene = PrimitiveSet::new(vec![prim], [0.0, 0.0, 0.0]).unwrap();
        let (v, g) = prior_volume(&scene);
        assert_eq!(v, 1.0);
        assert_eq!(g[0].to_array(), [1.0, 1.0, 1.0]);

        scene.primitives[0].scale = Vec3::new(2.0, 1.0, 1.0);
        let (v, g) = prior_volume(&scene);
        assert_eq!(v, 2.0);
        assert_eq!(g[0].x, 1.0);
        assert_eq!(g[0].y, 2.0);
        assert_eq!(g[0].z, 2.0);

        // Additivity: K identical primitives give K times the single value,
        // independent of position and rotation.
        let template = scene.primitives[0].clone();
        for i in 0..4 {
            let mut p = template.clone();
            p.position = Vec3::new(i as f64, 0.0, -3.0);
            p.rotation = Rotation::from_axis_angle(Vec3::new(0.3 * i as f64, 0.0, 0.0));
            scene.primitives.push(p);
        }
        let (v5, _) = prior_volume(&scene);
        assert!((v5 - 5.0 * 2.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_degenerates_to_loss_rec() {
        let mut r = rng(6);
        let (w, h) = (5, 4);
        let rendered = random_image(&mut r, 3 * w * h);
        let target = random_image(&mut r, 3 * w * h);
        let scene = empty_scene();
        let weights = LossWeights {
            lambda_perc: 0.0,
            lambda_vol: 0.0,
            adversarial_enabled: false,
            ..LossWeights::default()
        };
        let (breakdown, d_img, _) =
            total_loss(&rendered, &target, w, h, &scene, &weights, None).unwrap();
        let (rec, d_rec) = loss_rec(&rendered, &target).unwrap();
        assert_eq!(breakdown.total, rec);
        assert_eq!(d_img, d_rec);
    }

    #[test]
    fn total_loss_default_weights_match_reference_config() {
        let w = LossWeights::default();
        assert_eq!(w.lambda_perc, 20.0);
        assert_eq!(w.lambda_reg, 1e-4);
        assert!(!w.adversarial_enabled);
    }

    #[test]
    fn total_loss_adversarial_term_needs_critic() {
        let weights = LossWeights {
            adversarial_enabled: true,
            ..LossWeights::default()
        };
        let scene = empty_scene();
        let img = vec![0.2; 3 * 2 * 2];
        assert!(total_loss(&img, &img, 2, 2, &scene, &weights, None).is_err());
    }

    #[test]
    fn total_loss_adversarial_gradient_matches_finite_differences() {
        let mut r = rng(7);
        let (w, h) = (4, 3);
        let rendered = random_image(&mut r, 3 * w * h);
        let target: Vec<f64> = rendered
            .iter()
            .map(|v| v + if r.gen_bool(0.5) { 0.25 } else { -0.25 })
            .collect();
        let scene = empty_scene();
        let critic = LinearCritic::random(w, h, 8);
        let weights = LossWeights {
            lambda_perc: 3.0,
            perc_levels: 2,
            lambda_vol: 0.0,
            adversarial_enabled: true,
            ..LossWeights::default()
        };
        let (_, grad, _) =
            total_loss(&rendered, &target, w, h, &scene, &weights, Some(&critic)).unwrap();
        let step = 1e-6;
        for i in (0..rendered.len()).step_by(5) {
            let mut plus = rendered.clone();
            plus[i] += step;
            let mut minus = rendered.clone();
            minus[i] -= step;
            let fp = total_loss(&plus, &target, w, h, &scene, &weights, Some(&critic))
                .unwrap()
                .0
                .total;
            let fm = total_loss(&minus, &target, w, h, &scene, &weights, Some(&critic))
                .unwrap()
                .0
                .total;
            let fd = (fp - fm) / (2.0 * step);
            assert!(
                (grad[i] - fd).abs() < 1e-6,
                "entry {i}: analytic {} vs fd {fd}",
                grad[i]
            );
        }
    }

    /// End-to-end: render a 2-primitive scene at 8x8, push the total-loss
    /// image gradient through the renderer's backward pass, and compare
    /// against central finite differences of the full pipeline.
    #[test]
    fn total_loss_end_to_end_gradient_on_two_primitive_scene() {
        let camera = Camera::look_at(
            Vec3::new(0.0, 0.0, -3.0),
            Vec3::ZERO,
            Vec3::new(0.0, -1.0, 0.0),
            8.0,
            8,
            8,
        )
        .unwrap();
        let opts = RenderOptions {
            step: 0.11,
            record_tape: true,
            ..RenderOptions::default()
        };

        let make_scene = |tweak: f64| {
            let a = Primitive::new(
                Vec3::new(-0.25 + tweak, 0.1, 0.2),
                Rotation::from_axis_angle(Vec3::new(0.12, 0.4, 0.04)),
                Vec3::new(0.9, 0.8, 0.7),
                Payload::constant(2, [0.8, 0.3, 0.2], 0.35),
            )
            .unwrap();
            let b = Primitive::new(
                Vec3::new(0.45, -0.2, -0.1),
                Rotation::from_axis_angle(Vec3::new(-0.3, -0.06, 0.0)),
                Vec3::new(0.7, 0.9, 0.6),
                Payload::constant(2, [0.2, 0.6, 0.9], 0.3),
            )
            .unwrap();
            PrimitiveSet::new(vec![a, b], [0.1, 0.1, 0.12]).unwrap()
        };

        // Target: the same family of scene, visibly different parameters.
        let target_scene = make_scene(0.35);
        let bvh = build_bvh(&target_scene);
        let target = render(&camera, &target_scene, &bvh, &opts).unwrap().color.data;

        let weights = LossWeights {
            lambda_perc: 5.0,
            perc_levels: 2,
            lambda_vol: 0.5,
            adversarial_enabled: false,
            ..LossWeights::default()
        };

        let eval = |scene: &PrimitiveSet| -> f64 {
            let bvh = build_bvh(scene);
            let out = render(&camera, scene, &bvh, &opts).unwrap();
            let (b, _, _) =
                total_loss(&out.color.data, &target, 8, 8, scene, &weights, None).unwrap();
            b.total
        };

        // Analytic gradients.
        let scene = make_scene(0.0);
        let bvh = build_bvh(&scene);
        let out = render(&camera, &scene, &bvh, &opts).unwrap();
        let tape = out.tape.expect("record_tape was set");
        let (_, d_img, d_scale) =
            total_loss(&out.color.data, &target, 8, 8, &scene, &weights, None).unwrap();
        let d_img = crate::geom::ImageBuffer::from_data(8, 8, 3, d_img).unwrap();
        let mut grads = backward(&tape, &scene, &d_img).unwrap();
        for (g, extra) in grads.scale.iter_mut().zip(&d_scale) {
            *g += *extra;
        }

        let h = 1e-5;
        let rel = |a: f64, f: f64| (a - f).abs() / a.abs().max(f.abs()).max(1e-8);

        // Payload probes: an rgb node and an alpha node on each primitive.
        for k in 0..2 {
            let analytic_rgb = grads.rgb[k][3]; // node 1, channel 0
            let mut plus = scene.clone();
            plus.primitives[k].payload.rgb[3] += h;
            let mut minus = scene.clone();
            minus.primitives[k].payload.rgb[3] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            assert!(
                rel(analytic_rgb, fd) < 5e-3,
                "prim {k} rgb: analytic {analytic_rgb} vs fd {fd}"
            );

            let analytic_alpha = grads.alpha[k][2];
            let mut plus = scene.clone();
            plus.primitives[k].payload.alpha[2] += h;
            let mut minus = scene.clone();
            minus.primitives[k].payload.alpha[2] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            assert!(
                rel(analytic_alpha, fd) < 5e-3,
                "prim {k} alpha: analytic {analytic_alpha} vs fd {fd}"
            );
        }

        // Spatial probes on the first primitive: position.x and scale.y (the
        // scale probe also exercises the volume-prior contribution).
        let mut plus = scene.clone();
        plus.primitives[0].position.x += h;
        let mut minus = scene.clone();
        minus.primitives[0].position.x -= h;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
        assert!(
            rel(grads.position[0].x, fd) < 5e-3,
            "position.x: analytic {} vs fd {fd}",
            grads.position[0].x
        );

        let mut plus = scene.clone();
        plus.primitives[0].scale.y += h;
        let mut minus = scene.clone();
        minus.primitives[0].scale.y -= h;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
        assert!(
            rel(grads.scale[0].y, fd) < 5e-3,
            "scale.y: analytic {} vs fd {fd}",
            grads.scale[0].y
        );
    }
}
