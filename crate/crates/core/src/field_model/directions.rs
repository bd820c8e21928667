use std::f64::consts::PI;

const PRIMES: [u32; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

fn radical_inverse(mut k: u64, base: u32) -> f64 {
    let b = base as f64;
    let mut inv = 1.0 / b;
    let mut out = 0.0;
    while k > 0 {
        out += (k % base as u64) as f64 * inv;
        k /= base as u64;
        inv /= b;
    }
    out
}

/// Deterministic set of `n` unit directions on the sphere of `R^d`.
///
/// The `2d` signed coordinate axes come first so that axis-aligned
/// degeneracies are hit exactly; the rest is a low-discrepancy fill
/// (golden-angle circle for `d = 2`, Fibonacci sphere for `d = 3`, normalized
/// Halton–Box–Muller points above). In `d = 1` only `±1` exist.
pub fn direction_net(d: usize, n: usize) -> Vec<Vec<f64>> {
    let mut dirs = Vec::with_capacity(n.max(2 * d));
    for k in 0..d {
        for s in [1.0, -1.0] {
            let mut e = vec![0.0; d];
            e[k] = s;
            dirs.push(e);
        }
    }
    if d == 1 {
        return dirs;
    }
    let extra = n.saturating_sub(dirs.len());
    let golden = (5f64.sqrt() - 1.0) / 2.0;
    for k in 0..extra {
        let v = match d {
            2 => {
                let theta = 2.0 * PI * ((k as f64 + 0.5) * golden).fract();
                vec![theta.cos(), theta.sin()]
            }
            3 => {
                let z = 1.0 - 2.0 * (k as f64 + 0.5) / extra as f64;
                let r = (1.0 - z * z).max(0.0).sqrt();
                let phi = 2.0 * PI * (k as f64 * golden).fract();
                vec![r * phi.cos(), r * phi.sin(), z]
            }
            _ => {
                let mut g = Vec::with_capacity(d);
                let mut j = 0;
                while g.len() < d {
                    let u1 = radical_inverse(k as u64 + 1, PRIMES[(2 * j) % PRIMES.len()]);
                    let u2 = radical_inverse(k as u64 + 1, PRIMES[(2 * j + 1) % PRIMES.len()]);
                    let r = (-2.0 * u1.max(1e-300).ln()).sqrt();
                    g.push(r * (2.0 * PI * u2).cos());
                    if g.len() < d {
                        g.push(r * (2.0 * PI * u2).sin());
                    }
                    j += 1;
                }
                g
            }
        };
        let nrm = crate::linalg::norm(&v);
        if nrm > 0.0 {
            dirs.push(v.into_iter().map(|c| c / nrm).collect());
        }
    }
    dirs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_and_deterministic() {
        for d in 1..=5 {
            let net = direction_net(d, 64);
            assert!(net.len() >= 2 * d);
            for v in &net {
                assert!((crate::linalg::norm(v) - 1.0).abs() < 1e-12);
            }
            assert_eq!(net, direction_net(d, 64));
        }
        assert_eq!(direction_net(1, 64).len(), 2);
        assert_eq!(direction_net(3, 64).len(), 64);
    }
}
