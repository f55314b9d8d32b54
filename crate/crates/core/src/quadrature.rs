//! Gauss–Hermite rules for expectations under a standard normal.

/// Nodes and weights for `∫ e^{-t²} h(t) dt ≈ Σ w_i h(t_i)`, found by Newton
/// iteration on the orthonormal Hermite recurrence. Nodes are descending.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "need at least one node");
    const PIM4: f64 = 0.751_125_544_464_942_5; // π^{-1/4}
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let m = n.div_ceil(2);
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-14 {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Rule for `E[h(z)]`, `z ~ N(0, 1)`: nodes `√2 t_i`, weights `w_i / √π`.
pub fn standard_normal_rule(n: usize) -> (Vec<f64>, Vec<f64>) {
    let (t, w) = gauss_hermite(n);
    let s = std::f64::consts::PI.sqrt();
    (
        t.iter().map(|v| v * std::f64::consts::SQRT_2).collect(),
        w.iter().map(|v| v / s).collect(),
    )
}

/// Visits every point of the `n^d` tensor-product rule for `N(0, I_d)`.
pub fn for_each_tensor_node(d: usize, n: usize, mut f: impl FnMut(&[f64], f64)) {
    let (nodes, weights) = standard_normal_rule(n);
    let mut idx = vec![0usize; d];
    let mut z = vec![0.0; d];
    loop {
        let mut wt = 1.0;
        for (k, &i) in idx.iter().enumerate() {
            z[k] = nodes[i];
            wt *= weights[i];
        }
        f(&z, wt);
        let mut k = 0;
        loop {
            if k == d {
                return;
            }
            idx[k] += 1;
            if idx[k] < n {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_moments_are_exact() {
        let (z, w) = standard_normal_rule(32);
        let moment = |p: i32| z.iter().zip(&w).map(|(a, b)| b * a.powi(p)).sum::<f64>();
        assert!((moment(0) - 1.0).abs() < 1e-13);
        assert!(moment(1).abs() < 1e-13);
        assert!((moment(2) - 1.0).abs() < 1e-12);
        assert!((moment(4) - 3.0).abs() < 1e-11);
        assert!((moment(8) - 105.0).abs() < 1e-9);
    }

    #[test]
    fn small_rules_match_tables() {
        let (t, w) = gauss_hermite(2);
        assert!((t[0] - 0.5f64.sqrt()).abs() < 1e-14);
        assert!((w[0] - std::f64::consts::PI.sqrt() / 2.0).abs() < 1e-14);
        let (t, _) = gauss_hermite(3);
        assert!(t[1].abs() < 1e-14 && (t[0] - 1.5f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn tensor_rule_gaussian_expectation() {
        // E[exp(a·z)] = exp(|a|²/2)
        let a = [0.3, -0.2, 0.5];
        let mut acc = 0.0;
        let mut count = 0;
        for_each_tensor_node(3, 12, |z, w| {
            acc += w * (a[0] * z[0] + a[1] * z[1] + a[2] * z[2]).exp();
            count += 1;
        });
        assert_eq!(count, 12 * 12 * 12);
        let exact = (0.5 * (0.09 + 0.04 + 0.25f64)).exp();
        assert!((acc - exact).abs() < 1e-12);
    }
}
