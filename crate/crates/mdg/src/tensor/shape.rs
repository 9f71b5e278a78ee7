//! Shape and index arithmetic for row-major dense tensors.

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Trailing-dimension broadcast of two shapes. Panics on mismatch.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = dim_from_right(a, rank - 1 - i);
        let db = dim_from_right(b, rank - 1 - i);
        assert!(
            da == db || da == 1 || db == 1,
            "shape mismatch: cannot broadcast {a:?} with {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

/// Dimension `k` counted from the right, treating missing dims as 1.
fn dim_from_right(shape: &[usize], k: usize) -> usize {
    if k < shape.len() {
        shape[shape.len() - 1 - k]
    } else {
        1
    }
}

/// True if `small` equals the trailing dims of `big` once leading 1s are
/// stripped. The empty shape is a suffix of everything.
pub fn is_suffix_of(small: &[usize], big: &[usize]) -> bool {
    let trimmed: Vec<usize> = small.iter().copied().skip_while(|&d| d == 1).collect();
    if trimmed.len() > big.len() {
        return false;
    }
    big[big.len() - trimmed.len()..] == trimmed[..]
}

/// Map a flat index in `out_shape` to a flat index in `in_shape`, where
/// `in_shape` broadcasts (trailing rule) to `out_shape`.
pub fn broadcast_index(flat: usize, out_shape: &[usize], in_shape: &[usize]) -> usize {
    let rank = out_shape.len();
    let mut rem = flat;
    let mut idx = 0usize;
    let mut stride = 1usize;
    // Walk dims right to left, building the input offset.
    for k in 0..rank {
        let od = out_shape[rank - 1 - k];
        let coord = rem % od;
        rem /= od;
        let id = dim_from_right(in_shape, k);
        if id != 1 {
            idx += coord * stride;
        }
        if k < in_shape.len() {
            stride *= id;
        }
    }
    idx
}

/// Sum `grad` (laid out as `out_shape`) down to `in_shape`.
pub fn reduce_to_shape(grad: &[f64], out_shape: &[usize], in_shape: &[usize]) -> Vec<f64> {
    if out_shape == in_shape {
        return grad.to_vec();
    }
    let mut out = vec![0.0; numel(in_shape)];
    for (flat, &g) in grad.iter().enumerate() {
        out[broadcast_index(flat, out_shape, in_shape)] += g;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shapes(&[3, 1, 5], &[4, 5]), vec![3, 4, 5]);
        assert_eq!(broadcast_shapes(&[], &[2, 2]), vec![2, 2]);
        assert_eq!(broadcast_shapes(&[7], &[7]), vec![7]);
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn broadcast_mismatch_panics() {
        broadcast_shapes(&[3], &[4]);
    }

    #[test]
    fn suffix_checks() {
        assert!(is_suffix_of(&[5], &[3, 5]));
        assert!(is_suffix_of(&[1, 5], &[3, 5]));
        assert!(is_suffix_of(&[], &[3, 5]));
        assert!(!is_suffix_of(&[3], &[3, 5]));
    }

    #[test]
    fn reduce_sums_broadcast_dims() {
        // out (2,3) reduced to (3,): column sums.
        let g = [1., 2., 3., 4., 5., 6.];
        assert_eq!(reduce_to_shape(&g, &[2, 3], &[3]), vec![5., 7., 9.]);
        // reduced to scalar
        assert_eq!(reduce_to_shape(&g, &[2, 3], &[]), vec![21.]);
    }
}
