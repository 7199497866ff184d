//! Filtering primitives of the 1-D dual-tree filter bank, operating on
//! complex sequences. All three use half-sample symmetric extension with
//! repeated end samples.

use num_complex::Complex64;

type C = Complex64;

/// Half-sample symmetric index into `0..n` (`-1 -> 0`, `n -> n-1`).
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m >= n {
        2 * n - 1 - m
    } else {
        m
    }
}

/// 'valid' convolution: `out[i] = sum_k h[k] * x[i + m - 1 - k]`.
fn convolve_valid<I: Fn(usize) -> C>(len: usize, x: I, h: &[f64]) -> Vec<C> {
    let m = h.len();
    debug_assert!(len >= m);
    (0..=len - m)
        .map(|i| {
            let mut acc = C::new(0.0, 0.0);
            for (k, &hk) in h.iter().enumerate() {
                acc += x(i + m - 1 - k) * hk;
            }
            acc
        })
        .collect()
}

fn even_taps(h: &[f64]) -> Vec<f64> {
    h.iter().step_by(2).copied().collect()
}

fn odd_taps(h: &[f64]) -> Vec<f64> {
    h.iter().skip(1).step_by(2).copied().collect()
}

fn product_sum(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Filters without decimation. Odd-length `h` keeps the length; even-length
/// `h` adds one sample.
pub(crate) fn colfilter(x: &[C], h: &[f64]) -> Vec<C> {
    let r = x.len();
    let m2 = (h.len() / 2) as isize;
    let ext: Vec<usize> = (-m2..r as isize + m2).map(|i| reflect(i, r)).collect();
    convolve_valid(ext.len(), |i| x[ext[i]], h)
}

/// Two-tree decimating filter: `ha` acts on one phase of the input and `hb`
/// (its time reverse) on the other; outputs are interleaved. Length must be
/// a multiple of 4.
pub(crate) fn coldfilt(x: &[C], ha: &[f64], hb: &[f64]) -> Vec<C> {
    let r = x.len();
    debug_assert!(r.is_multiple_of(4) && ha.len() == hb.len() && ha.len().is_multiple_of(2));
    let m = ha.len() as isize;
    let ext: Vec<usize> = (-m..r as isize + m).map(|i| reflect(i, r)).collect();
    let (hao, hae, hbo, hbe) = (even_taps(ha), odd_taps(ha), even_taps(hb), odd_taps(hb));
    let t: Vec<usize> = (5..(r as isize + 2 * m - 2)).step_by(4).map(|v| v as usize).collect();
    let at = |offset: usize| -> Vec<C> { t.iter().map(|&v| x[ext[v - offset]]).collect() };
    let (x0, x1, x2, x3) = (at(0), at(1), at(2), at(3));
    let ya: Vec<C> = convolve_valid(t.len(), |i| x1[i], &hao).into_iter().zip(convolve_valid(t.len(), |i| x3[i], &hae)).map(|(p, q)| p + q).collect();
    let yb: Vec<C> = convolve_valid(t.len(), |i| x0[i], &hbo).into_iter().zip(convolve_valid(t.len(), |i| x2[i], &hbe)).map(|(p, q)| p + q).collect();
    let mut y = vec![C::new(0.0, 0.0); r / 2];
    let a_first = product_sum(ha, hb) > 0.0;
    for (j, (a, b)) in ya.into_iter().zip(yb).enumerate() {
        if a_first {
            y[2 * j] = a;
            y[2 * j + 1] = b;
        } else {
            y[2 * j] = b;
            y[2 * j + 1] = a;
        }
    }
    y
}

/// Two-tree interpolating filter, the synthesis counterpart of [`coldfilt`].
/// Doubles the length; input length must be even.
pub(crate) fn colifilt(x: &[C], ha: &[f64], hb: &[f64]) -> Vec<C> {
    let r = x.len();
    debug_assert!(r.is_multiple_of(2) && ha.len() == hb.len() && ha.len().is_multiple_of(2));
    let m = ha.len();
    let m2 = (m / 2) as isize;
    let ext: Vec<usize> = (-m2..r as isize + m2).map(|i| reflect(i, r)).collect();
    let (hao, hae, hbo, hbe) = (even_taps(ha), odd_taps(ha), even_taps(hb), odd_taps(hb));
    let a_first = product_sum(ha, hb) > 0.0;
    let mut y = vec![C::new(0.0, 0.0); 2 * r];

    if m2 % 2 == 0 {
        let t: Vec<usize> = (3..r + m).step_by(2).collect();
        let (ta, tb): (Vec<usize>, Vec<usize>) =
            if a_first { (t.clone(), t.iter().map(|v| v - 1).collect()) } else { (t.iter().map(|v| v - 1).collect(), t.clone()) };
        let pick = |idx: &[usize], offset: usize| -> Vec<C> { idx.iter().map(|&v| x[ext[v - offset]]).collect() };
        let (xb2, xa2, xb0, xa0) = (pick(&tb, 2), pick(&ta, 2), pick(&tb, 0), pick(&ta, 0));
        let streams = [
            convolve_valid(t.len(), |i| xb2[i], &hae),
            convolve_valid(t.len(), |i| xa2[i], &hbe),
            convolve_valid(t.len(), |i| xb0[i], &hao),
            convolve_valid(t.len(), |i| xa0[i], &hbo),
        ];
        interleave4(&mut y, streams);
    } else {
        let t: Vec<usize> = (2..r + m - 1).step_by(2).collect();
        let (ta, tb): (Vec<usize>, Vec<usize>) =
            if a_first { (t.clone(), t.iter().map(|v| v - 1).collect()) } else { (t.iter().map(|v| v - 1).collect(), t.clone()) };
        let xa: Vec<C> = ta.iter().map(|&v| x[ext[v]]).collect();
        let xb: Vec<C> = tb.iter().map(|&v| x[ext[v]]).collect();
        let streams = [
            convolve_valid(t.len(), |i| xb[i], &hao),
            convolve_valid(t.len(), |i| xa[i], &hbo),
            convolve_valid(t.len(), |i| xb[i], &hae),
            convolve_valid(t.len(), |i| xa[i], &hbe),
        ];
        interleave4(&mut y, streams);
    }
    y
}

fn interleave4(y: &mut [C], streams: [Vec<C>; 4]) {
    for (phase, s) in streams.iter().enumerate() {
        for (j, v) in s.iter().enumerate() {
            y[4 * j + phase] = *v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_repeats_end_samples() {
        let idx: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(idx, vec![2, 1, 0, 0, 1, 2, 3, 4, 4, 3, 2]);
    }

    #[test]
    fn lengths() {
        let x = vec![C::new(1.0, 0.0); 16];
        assert_eq!(colfilter(&x, &[1.0, 2.0, 1.0]).len(), 16);
        assert_eq!(coldfilt(&x, super::super::filters::QSHIFT_A.h0b, super::super::filters::QSHIFT_A.h0a).len(), 8);
        assert_eq!(colifilt(&x, super::super::filters::QSHIFT_A.g0b, super::super::filters::QSHIFT_A.g0a).len(), 32);
    }
}
