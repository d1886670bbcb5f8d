//! Adam optimizer over a flat parameter vector, with exact state
//! serialization so an interrupted run resumes bitwise identically.

use std::io::{Read, Write};

use super::TrainError;

/// Adam hyperparameters. Defaults match the reference configuration
/// (learning rate 0.001) and the usual moment decays.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 0.001, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam state: first and second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

const ADAM_MAGIC: &[u8] = b"PRIMVOL-ADAM 1\n";

impl Adam {
    pub fn new(n: usize, config: AdamConfig) -> Adam {
        Adam { config, m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), TrainError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TrainError::Shape(format!(
                "adam over {} values got params {} / grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        Ok(())
    }

    /// Serialize the full state (config, step, moments) as little-endian
    /// binary behind a magic header.
    pub fn write_to(&self, out: &mut impl Write) -> Result<(), TrainError> {
        out.write_all(ADAM_MAGIC)?;
        out.write_all(&(self.m.len() as u64).to_le_bytes())?;
        out.write_all(&self.step.to_le_bytes())?;
        for v in [self.config.lr, self.config.beta1, self.config.beta2, self.config.eps] {
            out.write_all(&v.to_le_bytes())?;
        }
        for block in [&self.m, &self.v] {
            for v in block {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Inverse of [`Adam::write_to`]; the result is bitwise identical to the
    /// serialized optimizer.
    pub fn read_from(input: &mut impl Read) -> Result<Adam, TrainError> {
        let mut magic = vec![0u8; ADAM_MAGIC.len()];
        input.read_exact(&mut magic)?;
        if magic != ADAM_MAGIC {
            return Err(TrainError::BadData("not an adam state block".into()));
        }
        let mut u = [0u8; 8];
        input.read_exact(&mut u)?;
        let n = u64::from_le_bytes(u) as usize;
        input.read_exact(&mut u)?;
        let step = u64::from_le_bytes(u);
        let mut f = || -> Result<f64, TrainError> {
            let mut b = [0u8; 8];
            input.read_exact(&mut b)?;
            Ok(f64::from_le_bytes(b))
        };
        let config = AdamConfig { lr: f()?, beta1: f()?, beta2: f()?, eps: f()? };
        let mut read_block = |n: usize| -> Result<Vec<f64>, TrainError> {
            let mut out = Vec::with_capacity(n);
            let mut b = [0u8; 8];
            for _ in 0..n {
                input.read_exact(&mut b)?;
                out.push(f64::from_le_bytes(b));
            }
            Ok(out)
        };
        let m = read_block(n)?;
        let v = read_block(n)?;
        Ok(Adam { config, m, v, step })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn converges_on_a_convex_quadratic() {
        // minimize |p - target|^2
        let target = [1.5, -0.3, 0.8];
        let mut p = vec![0.0; 3];
        let mut adam = Adam::new(3, AdamConfig { lr: 0.05, ..AdamConfig::default() });
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().zip(&target).map(|(p, t)| 2.0 * (p - t)).collect();
            adam.step(&mut p, &g).unwrap();
        }
        for (p, t) in p.iter().zip(&target) {
            assert!((p - t).abs() < 1e-4, "{p} vs {t}");
        }
    }

    #[test]
    fn first_step_moves_by_lr_in_gradient_direction() {
        // With bias correction, the first Adam step is lr * sign(g) up to eps.
        let mut p = vec![0.0, 0.0];
        let mut adam = Adam::new(2, AdamConfig::default());
        adam.step(&mut p, &[0.7, -3.0]).unwrap();
        assert!((p[0] + 0.001).abs() < 1e-6);
        assert!((p[1] - 0.001).abs() < 1e-6);
    }

    #[test]
    fn state_roundtrip_resumes_bitwise() {
        let mut p_a = vec![0.3, -0.2, 0.9, 0.0];
        let mut adam_a = Adam::new(4, AdamConfig::default());
        let grad = |p: &[f64]| -> Vec<f64> { p.iter().map(|v| v.cos() + 0.3 * v).collect() };
        for _ in 0..7 {
            let g = grad(&p_a);
            adam_a.step(&mut p_a, &g).unwrap();
        }

        // Serialize mid-run, keep stepping the original.
        let mut blob = Vec::new();
        adam_a.write_to(&mut blob).unwrap();
        let mut p_b = p_a.clone();
        let mut adam_b = Adam::read_from(&mut blob.as_slice()).unwrap();

        for _ in 0..9 {
            let g = grad(&p_a);
            adam_a.step(&mut p_a, &g).unwrap();
            let g = grad(&p_b);
            adam_b.step(&mut p_b, &g).unwrap();
        }
        for (a, b) in p_a.iter().zip(&p_b) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_mismatched_lengths() {
        let mut adam = Adam::new(3, AdamConfig::default());
        assert!(adam.step(&mut [0.0; 2], &[0.0; 3]).is_err());
        assert!(adam.step(&mut [0.0; 3], &[0.0; 2]).is_err());
    }

    #[test]
    fn rejects_corrupt_state() {
        let adam = Adam::new(2, AdamConfig::default());
        let mut blob = Vec::new();
        adam.write_to(&mut blob).unwrap();
        blob[0] ^= 0xff;
        assert!(Adam::read_from(&mut blob.as_slice()).is_err());
        let mut blob2 = Vec::new();
        adam.write_to(&mut blob2).unwrap();
        blob2.truncate(blob2.len() - 3);
        assert!(Adam::read_from(&mut blob2.as_slice()).is_err());
    }
}
