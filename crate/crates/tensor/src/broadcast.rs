//! Numpy-style broadcasting over trailing-aligned shapes.

use crate::element::Element;

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// How positions of a broadcast output map back onto one input.
pub(crate) enum Mapping {
    /// Input has the output's shape.
    Same,
    /// Input repeats with period `len` (it matches a trailing block).
    Cyclic(usize),
    /// General: explicit input offset per output position.
    Table(Vec<usize>),
}

impl Mapping {
    pub(crate) fn new(out: &[usize], input: &[usize]) -> Self {
        let n_in: usize = input.iter().product();
        let n_out: usize = out.iter().product();
        if n_in == n_out {
            return Mapping::Same;
        }
        // Trailing block: after stripping leading unit dims the input equals
        // the trailing dims of the output.
        let stripped: Vec<usize> = input.iter().copied().skip_while(|&d| d == 1).collect();
        if stripped.len() <= out.len() && out[out.len() - stripped.len()..] == stripped[..] {
            return Mapping::Cyclic(n_in);
        }
        Mapping::Table(index_table(out, input))
    }

    #[inline]
    pub(crate) fn index(&self, i: usize) -> usize {
        match self {
            Mapping::Same => i,
            Mapping::Cyclic(n) => i % n,
            Mapping::Table(t) => t[i],
        }
    }
}

fn index_table(out: &[usize], input: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let pad = rank - input.len();
    // input strides aligned to output axes, zero where broadcast
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..input.len()).rev() {
        strides[i + pad] = if input[i] == 1 { 0 } else { s };
        s *= input[i];
    }
    let n: usize = out.iter().product();
    let mut table = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        table.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    table
}

/// Sums a gradient of the broadcast output shape back onto the input shape.
pub(crate) fn reduce_to<T: Element>(g: &[T], out: &[usize], input: &[usize]) -> Vec<T> {
    let n_in: usize = input.iter().product();
    match Mapping::new(out, input) {
        Mapping::Same => g.to_vec(),
        m => {
            let mut acc = vec![T::zero(); n_in];
            for (i, &v) in g.iter().enumerate() {
                let j = m.index(i);
                acc[j] = acc[j] + v;
            }
            acc
        }
    }
}
