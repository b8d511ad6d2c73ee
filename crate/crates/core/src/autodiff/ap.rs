//! Histogram-binned average precision. Similarities in `[−1, 1]` are spread
//! over `bins` evenly spaced centers (1 down to −1) with a triangular kernel;
//! precision and recall are then read off the cumulative bin counts.

/// Label value for entries excluded from the ranking.
pub const AP_IGNORE: i8 = -1;

struct Binned {
    /// Positive mass per bin.
    pos: Vec<f64>,
    cum_pos: Vec<f64>,
    cum_all: Vec<f64>,
    total_pos: f64,
}

fn bin_width(bins: usize) -> f64 {
    2.0 / (bins - 1) as f64
}

fn center(m: usize, bins: usize) -> f64 {
    1.0 - m as f64 * bin_width(bins)
}

/// Bin range touched by similarity `s`, with the kernel weight per bin.
fn assignments(s: f64, bins: usize) -> impl Iterator<Item = (usize, f64, f64)> {
    let delta = bin_width(bins);
    let pos = (1.0 - s) / delta;
    let lo = pos.floor().max(0.0) as usize;
    let hi = (lo + 1).min(bins - 1);
    (lo..=hi).filter_map(move |m| {
        let d = s - center(m, bins);
        let w = 1.0 - d.abs() / delta;
        (w > 0.0).then(|| (m, w, -d.signum() / delta))
    })
}

fn bin(sims: &[f64], labels: &[i8], bins: usize) -> Binned {
    let mut pos = vec![0.0; bins];
    let mut all = vec![0.0; bins];
    for (&s, &l) in sims.iter().zip(labels) {
        if l == AP_IGNORE {
            continue;
        }
        for (m, w, _) in assignments(s, bins) {
            all[m] += w;
            if l == 1 {
                pos[m] += w;
            }
        }
    }
    let mut cum_pos = pos.clone();
    let mut cum_all = all;
    for m in 1..bins {
        cum_pos[m] += cum_pos[m - 1];
        cum_all[m] += cum_all[m - 1];
    }
    let total_pos = pos.iter().sum();
    Binned {
        pos,
        cum_pos,
        cum_all,
        total_pos,
    }
}

/// Soft-binned AP of one query's ranked candidates (0 when there are no positives).
pub fn soft_average_precision(sims: &[f64], labels: &[i8], bins: usize) -> f64 {
    let b = bin(sims, labels, bins);
    if b.total_pos <= 0.0 {
        return 0.0;
    }
    (0..bins)
        .filter(|&m| b.cum_all[m] > 0.0)
        .map(|m| b.cum_pos[m] / b.cum_all[m] * b.pos[m] / b.total_pos)
        .sum()
}

/// Adds `upstream · ∂AP/∂sims` into `grad`.
pub(super) fn soft_ap_backward(
    sims: &[f64],
    labels: &[i8],
    bins: usize,
    upstream: f64,
    grad: &mut [f64],
) {
    let b = bin(sims, labels, bins);
    if b.total_pos <= 0.0 {
        return;
    }
    let total = b.total_pos;
    let ap = soft_average_precision(sims, labels, bins);

    // Suffix sums over bins m >= k of the terms that depend on cum_pos[m] / cum_all[m].
    let mut d_pos = vec![0.0; bins];
    let mut d_all = vec![0.0; bins];
    let mut suffix_p = 0.0;
    let mut suffix_a = 0.0;
    for m in (0..bins).rev() {
        if b.cum_all[m] > 0.0 {
            let rec = b.pos[m] / total;
            suffix_p += rec / b.cum_all[m];
            suffix_a -= rec * b.cum_pos[m] / b.cum_all[m].powi(2);
        }
        let prec = if b.cum_all[m] > 0.0 {
            b.cum_pos[m] / b.cum_all[m]
        } else {
            0.0
        };
        d_pos[m] = suffix_p + prec / total - ap / total;
        d_all[m] = suffix_a;
    }

    for ((&s, &l), g) in sims.iter().zip(labels).zip(grad.iter_mut()) {
        if l == AP_IGNORE {
            continue;
        }
        let mut acc = 0.0;
        for (m, _, dw) in assignments(s, bins) {
            let dd = d_all[m] + if l == 1 { d_pos[m] } else { 0.0 };
            acc += dd * dw;
        }
        *g += upstream * acc;
    }
}
