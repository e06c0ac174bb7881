use super::FeatureSequence;
use crate::matrix::Matrix;

/// Splices each frame with its `left` predecessors and `right` successors.
///
/// Row `t` of the output is frames `t-left ..= t+right` concatenated, with
/// out-of-range indices clamped to the first or last frame. The number of
/// frames is unchanged and the dimension becomes `D * (left + right + 1)`.
pub fn stack_context(fs: &FeatureSequence, left: usize, right: usize) -> FeatureSequence {
    let t_len = fs.len();
    let d = fs.dim();
    let width = left + right + 1;
    let mut out = Matrix::zeros(t_len, d * width);
    for t in 0..t_len {
        let row = out.row_mut(t);
        for (k, chunk) in row.chunks_exact_mut(d.max(1)).enumerate().take(width) {
            let src = (t + k).saturating_sub(left).min(t_len - 1);
            chunk.copy_from_slice(fs.frames.row(src));
        }
    }
    FeatureSequence { utterance_id: fs.utterance_id.clone(), frames: out }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(rows: usize, dim: usize) -> FeatureSequence {
        let data = (0..rows * dim).map(|v| v as f64).collect();
        FeatureSequence::new("u", Matrix::from_vec(rows, dim, data).unwrap()).unwrap()
    }

    #[test]
    fn output_dim_for_eleven_frame_window() {
        let out = stack_context(&seq(20, 40), 5, 5);
        assert_eq!(out.dim(), 440);
        assert_eq!(out.len(), 20);
    }

    #[test]
    fn zero_window_is_identity() {
        let fs = seq(7, 3);
        assert_eq!(stack_context(&fs, 0, 0), fs);
    }

    #[test]
    fn single_frame_is_replicated() {
        let fs = seq(1, 4);
        let out = stack_context(&fs, 5, 5);
        assert_eq!(out.dim(), 44);
        for chunk in out.frames.row(0).chunks(4) {
            assert_eq!(chunk, fs.frames.row(0));
        }
    }

    #[test]
    fn rows_depend_only_on_clamped_window() {
        let fs = seq(9, 2);
        let (left, right) = (2, 1);
        let base = stack_context(&fs, left, right);
        for perturbed in 0..9 {
            let mut p = fs.clone();
            p.frames.row_mut(perturbed)[0] += 100.0;
            let out = stack_context(&p, left, right);
            for t in 0usize..9 {
                let lo = t.saturating_sub(left);
                let hi = (t + right).min(8);
                let changed = out.frames.row(t) != base.frames.row(t);
                assert_eq!(changed, (lo..=hi).contains(&perturbed), "t={t} p={perturbed}");
            }
        }
    }

    #[test]
    fn asymmetric_window_layout() {
        let fs = seq(3, 1);
        let out = stack_context(&fs, 1, 0);
        assert_eq!(out.frames.as_slice(), &[0.0, 0.0, 0.0, 1.0, 1.0, 2.0]);
    }
}
