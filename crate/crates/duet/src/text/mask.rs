//! Span masking of up-sampled unit streams.

use rand::Rng;

use super::TextError;

/// Mark random spans until at least `ceil(rate * len)` positions are masked,
/// then substitute the mask id at every marked position. Spans may overlap
/// and are clipped at the sequence end, so the realized fraction overshoots
/// the rate slightly.
pub fn mask_spans<R: Rng>(
    ids: &[u32],
    mask_id: u32,
    rate: f64,
    span: usize,
    rng: &mut R,
) -> Result<(Vec<u32>, Vec<bool>), TextError> {
    if ids.is_empty() {
        return Err(TextError::EmptyText);
    }
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(TextError::BadMaskRate(rate));
    }
    let len = ids.len();
    let span = span.max(1);
    let target = (rate * len as f64).ceil() as usize;
    let mut flags = vec![false; len];
    let mut masked = 0usize;
    while masked < target {
        let start = rng.gen_range(0..len);
        for flag in flags.iter_mut().skip(start).take(span) {
            if !*flag {
                *flag = true;
                masked += 1;
            }
        }
    }
    let out = ids
        .iter()
        .zip(&flags)
        .map(|(&id, &m)| if m { mask_id } else { id })
        .collect();
    Ok((out, flags))
}
