use crate::error::{Error, Result};
use crate::logmath::logsumexp;
use crate::posteriorgram::Posteriorgram;

/// Keeps the `k` labels with the highest max-over-time probability (ties to
/// the lower id) and renormalizes every frame over them. With `keep_blank`
/// the blank always survives and counts toward `k`.
pub fn topk_prune(pg: &Posteriorgram, k: usize, keep_blank: bool, blank: usize) -> Result<Posteriorgram> {
    let width = pg.labels();
    if k == 0 || k > width {
        return Err(Error::arg(format!("top-k needs 1 <= k <= {width}, got {k}")));
    }
    if blank >= width {
        return Err(Error::arg(format!("blank id {blank} outside posteriorgram width {width}")));
    }
    if k == width {
        return Ok(pg.clone());
    }
    let mut s_max = vec![f64::NEG_INFINITY; width];
    for row in pg.rows() {
        for (m, &v) in s_max.iter_mut().zip(row) {
            *m = m.max(v);
        }
    }
    let mut order: Vec<usize> = (0..width).collect();
    order.sort_by(|&a, &b| s_max[b].total_cmp(&s_max[a]).then(a.cmp(&b)));
    let mut kept = vec![false; width];
    let mut count = 0;
    if keep_blank {
        kept[blank] = true;
        count = 1;
    }
    for &label in &order {
        if count == k {
            break;
        }
        if !kept[label] {
            kept[label] = true;
            count += 1;
        }
    }

    let mut out = Vec::with_capacity(pg.as_slice().len());
    for (t, row) in pg.rows().enumerate() {
        let untouched = row
            .iter()
            .zip(&kept)
            .all(|(&v, &keep)| keep || v == f64::NEG_INFINITY);
        if untouched {
            out.extend_from_slice(row);
            continue;
        }
        let masked: Vec<f64> = row
            .iter()
            .zip(&kept)
            .map(|(&v, &keep)| if keep { v } else { f64::NEG_INFINITY })
            .collect();
        let z = logsumexp(&masked);
        if z == f64::NEG_INFINITY {
            return Err(Error::arg(format!("frame {t} has no probability mass on the kept labels")));
        }
        out.extend(masked.into_iter().map(|v| v - z));
    }
    Posteriorgram::with_frame_duration(out, pg.frames(), width, pg.frame_duration_ms())
}
