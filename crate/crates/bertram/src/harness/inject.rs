//! Splicing learned vectors into uncontextualized embedding sequences.
//!
//! Replace-style injection collapses each wordpiece span to one vector;
//! slash-style keeps the original pieces and appends `e_/ v` after the span,
//! so the model sees both representations.

use crate::error::{Error, Result};
use crate::math::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    /// Exclusive end.
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }
}

#[derive(Debug, Clone)]
pub struct Injection {
    pub span: Span,
    pub vector: Vec<f32>,
}

fn validate_plan(plan: &[Injection], rows: usize, d: usize) -> Result<Vec<usize>> {
    let mut order: Vec<usize> = (0..plan.len()).collect();
    order.sort_by_key(|&i| plan[i].span.start);
    let mut prev_end = 0usize;
    for &i in &order {
        let span = plan[i].span;
        if span.is_empty() || span.end > rows {
            return Err(Error::domain(format!(
                "invalid span {}..{} for a sequence of {rows} rows",
                span.start, span.end
            )));
        }
        if span.start < prev_end {
            return Err(Error::domain(format!(
                "overlapping spans at {}..{}",
                span.start, span.end
            )));
        }
        if plan[i].vector.len() != d {
            return Err(Error::ShapeMismatch {
                op: "inject",
                lhs: vec![d],
                rhs: vec![plan[i].vector.len()],
            });
        }
        prev_end = span.end;
    }
    Ok(order)
}

/// Everything needed to re-expand a replace-injected sequence.
pub struct ReplaceUndo {
    /// (original span, its removed rows, position of the vector in the new
    /// sequence), in ascending span order.
    entries: Vec<(Span, Vec<Vec<f32>>, usize)>,
    d: usize,
}

impl ReplaceUndo {
    /// Rebuild the original sequence from the injected one.
    pub fn restore(&self, injected: &Tensor) -> Tensor {
        let d = self.d;
        let mut rows: Vec<Vec<f32>> = (0..injected.rows())
            .map(|r| injected.row(r).to_vec())
            .collect();
        // expand from the back so earlier positions stay valid
        for (span, removed, new_pos) in self.entries.iter().rev() {
            let _ = span;
            rows.splice(*new_pos..*new_pos + 1, removed.iter().cloned());
        }
        let flat: Vec<f32> = rows.into_iter().flatten().collect();
        Tensor::new(vec![flat.len() / d, d], flat).expect("consistent rows")
    }
}

/// Collapse each span to its vector. The output length is
/// `n - Σ(span_len - 1)`.
pub fn inject_replace(e: &Tensor, plan: &[Injection]) -> Result<(Tensor, ReplaceUndo)> {
    let (n, d) = (e.rows(), e.cols());
    let order = validate_plan(plan, n, d)?;
    let mut out: Vec<f32> = Vec::new();
    let mut entries = Vec::with_capacity(plan.len());
    let mut cursor = 0usize;
    let mut new_rows = 0usize;
    for &i in &order {
        let span = plan[i].span;
        for r in cursor..span.start {
            out.extend_from_slice(e.row(r));
            new_rows += 1;
        }
        entries.push((
            span,
            (span.start..span.end).map(|r| e.row(r).to_vec()).collect(),
            new_rows,
        ));
        out.extend_from_slice(&plan[i].vector);
        new_rows += 1;
        cursor = span.end;
    }
    for r in cursor..n {
        out.extend_from_slice(e.row(r));
        new_rows += 1;
    }
    Ok((
        Tensor::new(vec![new_rows, d], out)?,
        ReplaceUndo { entries, d },
    ))
}

/// Where a position outside every span lands after replace-injection.
pub fn adjust_position(plan: &[Injection], pos: usize) -> usize {
    let mut shift = 0usize;
    for inj in plan {
        if inj.span.end <= pos {
            shift += inj.span.len() - 1;
        }
    }
    pos - shift
}

/// Append `e_/ v` after each span; output length is `n + 2·spans`. When a
/// `max_len` is given and exceeded, unprotected rows are dropped from the
/// outside in (specials at the edges and all span/inserted rows are pinned);
/// if that cannot reach the limit the injection fails.
pub fn inject_slash(
    e: &Tensor,
    plan: &[Injection],
    slash_vector: &[f32],
    max_len: Option<usize>,
) -> Result<Tensor> {
    let (n, d) = (e.rows(), e.cols());
    let order = validate_plan(plan, n, d)?;
    if slash_vector.len() != d {
        return Err(Error::ShapeMismatch {
            op: "inject_slash",
            lhs: vec![d],
            rhs: vec![slash_vector.len()],
        });
    }
    // protected: inside a span, or one of the two inserted rows
    let mut rows: Vec<(Vec<f32>, bool)> = Vec::with_capacity(n + 2 * plan.len());
    let mut cursor = 0usize;
    for &i in &order {
        let span = plan[i].span;
        for r in cursor..span.start {
            rows.push((e.row(r).to_vec(), false));
        }
        for r in span.start..span.end {
            rows.push((e.row(r).to_vec(), true));
        }
        rows.push((slash_vector.to_vec(), true));
        rows.push((plan[i].vector.clone(), true));
        cursor = span.end;
    }
    for r in cursor..n {
        rows.push((e.row(r).to_vec(), false));
    }
    if let Some(limit) = max_len {
        if !rows.is_empty() {
            rows.first_mut().map(|r| r.1 = true);
            rows.last_mut().map(|r| r.1 = true);
        }
        let mut from_front = true;
        while rows.len() > limit {
            let candidate = if from_front {
                rows.iter().position(|(_, p)| !p)
            } else {
                rows.iter().rposition(|(_, p)| !p)
            };
            match candidate {
                Some(idx) => {
                    rows.remove(idx);
                }
                None => {
                    return Err(Error::domain(format!(
                        "cannot fit {} protected rows into a limit of {limit}",
                        rows.len()
                    )));
                }
            }
            from_front = !from_front;
        }
    }
    let count = rows.len();
    let flat: Vec<f32> = rows.into_iter().flat_map(|(r, _)| r).collect();
    Tensor::new(vec![count, d], flat)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(n: usize, d: usize) -> Tensor {
        let data: Vec<f32> = (0..n * d).map(|i| i as f32).collect();
        Tensor::new(vec![n, d], data).unwrap()
    }

    fn inj(start: usize, end: usize, fill: f32, d: usize) -> Injection {
        Injection {
            span: Span { start, end },
            vector: vec![fill; d],
        }
    }

    #[test]
    fn four_piece_span_collapses_eight_to_five() {
        // mirrors the "un ##ic ##y ##cle" case: 8 pieces, span of 4
        let e = seq(8, 3);
        let plan = vec![inj(2, 6, 9.0, 3)];
        let (out, _) = inject_replace(&e, &plan).unwrap();
        assert_eq!(out.rows(), 5);
        assert_eq!(out.row(2), &[9.0, 9.0, 9.0]);
        assert_eq!(out.row(3), e.row(6));
        assert_eq!(adjust_position(&plan, 7), 4);
    }

    #[test]
    fn length_one_span_swaps_in_place() {
        let e = seq(4, 2);
        let plan = vec![inj(1, 2, 5.0, 2)];
        let (out, _) = inject_replace(&e, &plan).unwrap();
        assert_eq!(out.rows(), 4);
        assert_eq!(out.row(1), &[5.0, 5.0]);
        assert_eq!(out.row(0), e.row(0));
        assert_eq!(out.row(2), e.row(2));
    }

    #[test]
    fn restore_is_the_identity() {
        let e = seq(9, 2);
        let plan = vec![inj(1, 3, 7.0, 2), inj(5, 8, 8.0, 2)];
        let (out, undo) = inject_replace(&e, &plan).unwrap();
        assert_eq!(out.rows(), 9 - 1 - 2);
        let restored = undo.restore(&out);
        assert_eq!(restored.shape(), e.shape());
        assert_eq!(restored.data(), e.data());
    }

    #[test]
    fn overlapping_spans_are_rejected() {
        let e = seq(6, 2);
        let plan = vec![inj(1, 4, 1.0, 2), inj(3, 5, 2.0, 2)];
        assert!(inject_replace(&e, &plan).is_err());
        assert!(inject_replace(&e, &[inj(4, 4, 1.0, 2)]).is_err()); // empty span
        assert!(inject_replace(&e, &[inj(4, 9, 1.0, 2)]).is_err()); // out of range
    }

    #[test]
    fn slash_appends_two_rows_after_the_span() {
        let e = seq(6, 2);
        let plan = vec![inj(2, 4, 9.0, 2)];
        let out = inject_slash(&e, &plan, &[0.5, 0.5], None).unwrap();
        assert_eq!(out.rows(), 8);
        // e0 e1 e2 e3 / v e4 e5
        assert_eq!(out.row(3), e.row(3));
        assert_eq!(out.row(4), &[0.5, 0.5]);
        assert_eq!(out.row(5), &[9.0, 9.0]);
        assert_eq!(out.row(6), e.row(4));
    }

    #[test]
    fn slash_with_no_spans_is_identity() {
        let e = seq(5, 2);
        let out = inject_slash(&e, &[], &[0.5, 0.5], None).unwrap();
        assert_eq!(out.data(), e.data());
    }

    #[test]
    fn two_span_slash_matches_brute_force_rebuild() {
        let e = seq(7, 2);
        let plan = vec![inj(1, 2, 8.0, 2), inj(4, 6, 9.0, 2)];
        let out = inject_slash(&e, &plan, &[0.25, 0.25], None).unwrap();

        // explicit rebuild
        let mut expected: Vec<Vec<f32>> = Vec::new();
        for r in 0..7 {
            expected.push(e.row(r).to_vec());
            if r == 1 {
                expected.push(vec![0.25, 0.25]);
                expected.push(vec![8.0, 8.0]);
            }
            if r == 5 {
                expected.push(vec![0.25, 0.25]);
                expected.push(vec![9.0, 9.0]);
            }
        }
        assert_eq!(out.rows(), expected.len());
        for (r, want) in expected.iter().enumerate() {
            assert_eq!(out.row(r), want.as_slice(), "row {r}");
        }
    }

    #[test]
    fn slash_crop_preserves_spans_and_edges() {
        let e = seq(10, 2);
        let plan = vec![inj(4, 6, 9.0, 2)];
        let out = inject_slash(&e, &plan, &[0.5, 0.5], Some(8)).unwrap();
        assert_eq!(out.rows(), 8);
        // edges pinned
        assert_eq!(out.row(0), e.row(0));
        assert_eq!(out.row(7), e.row(9));
        // the span rows and both insertions survive
        let rows: Vec<&[f32]> = (0..8).map(|r| out.row(r)).collect();
        assert!(rows.contains(&e.row(4)));
        assert!(rows.contains(&e.row(5)));
        assert!(rows.iter().filter(|r| **r == [0.5, 0.5]).count() == 1);
        assert!(rows.iter().filter(|r| **r == [9.0, 9.0]).count() == 1);
    }

    #[test]
    fn impossible_crop_is_an_error() {
        let e = seq(4, 2);
        let plan = vec![inj(1, 3, 9.0, 2)];
        // protected: rows 0,3 (edges) + span 1..3 + 2 insertions = 6 > 5? limit 5
        assert!(inject_slash(&e, &plan, &[0.5, 0.5], Some(5)).is_err());
    }
}
