//! Dense matrix and elementwise kernels.
//!
//! Every kernel accumulates each output element in a fixed index order, so
//! results are bitwise reproducible across runs and across callers that slice
//! the same rows differently.

use alloc::format;
use alloc::vec;

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Dot product with a fixed four-lane accumulation scheme.
#[inline]
pub fn dot<E: Elem>(a: &[E], b: &[E]) -> E {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [E::ZERO; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        s += a[j] * b[j];
    }
    s
}

/// y += alpha * x
#[inline]
pub fn axpy<E: Elem>(alpha: E, x: &[E], y: &mut [E]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x.iter()) {
        *yi += alpha * xi;
    }
}

fn dims2<E: Elem>(t: &Tensor<E>, op: &'static str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::ShapeMismatch { op, detail: format!("expected rank 2, got {:?}", t.shape()) });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// C[m,n] = A[m,k] * B[k,n]. Each C element accumulates over k in ascending
/// order, matching a naive dot product.
pub fn matmul<E: Elem>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (m, ka) = dims2(a, "matmul")?;
    let (kb, n) = dims2(b, "matmul")?;
    if ka != kb {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            detail: format!("inner extents {ka} vs {kb}"),
        });
    }
    let mut out = vec![E::ZERO; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * ka..(i + 1) * ka];
        let orow = &mut out[i * n..(i + 1) * n];
        for (t, &av) in arow.iter().enumerate() {
            axpy(av, &bd[t * n..(t + 1) * n], orow);
        }
    }
    Tensor::new(vec![m, n], out)
}

/// C[m,k] = A[m,n] * B[k,n]^T (rows of A against rows of B).
pub fn matmul_nt<E: Elem>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (m, na) = dims2(a, "matmul_nt")?;
    let (k, nb) = dims2(b, "matmul_nt")?;
    if na != nb {
        return Err(Error::ShapeMismatch {
            op: "matmul_nt",
            detail: format!("inner extents {na} vs {nb}"),
        });
    }
    let mut out = vec![E::ZERO; m * k];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * na..(i + 1) * na];
        for t in 0..k {
            out[i * k + t] = dot(arow, &bd[t * nb..(t + 1) * nb]);
        }
    }
    Tensor::new(vec![m, k], out)
}

/// C[k,n] = A[m,k]^T * B[m,n].
pub fn matmul_tn<E: Elem>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (ma, k) = dims2(a, "matmul_tn")?;
    let (mb, n) = dims2(b, "matmul_tn")?;
    if ma != mb {
        return Err(Error::ShapeMismatch {
            op: "matmul_tn",
            detail: format!("leading extents {ma} vs {mb}"),
        });
    }
    let mut out = vec![E::ZERO; k * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..ma {
        let brow = &bd[i * n..(i + 1) * n];
        for t in 0..k {
            axpy(ad[i * k + t], brow, &mut out[t * n..(t + 1) * n]);
        }
    }
    Tensor::new(vec![k, n], out)
}

fn same_shape<E: Elem>(a: &Tensor<E>, b: &Tensor<E>, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

pub fn add<E: Elem>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    same_shape(a, b, "add")?;
    Ok(zip_map(a, b, |x, y| x + y))
}

pub fn sub<E: Elem>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    same_shape(a, b, "sub")?;
    Ok(zip_map(a, b, |x, y| x - y))
}

pub fn mul<E: Elem>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    same_shape(a, b, "mul")?;
    Ok(zip_map(a, b, |x, y| x * y))
}

fn zip_map<E: Elem>(a: &Tensor<E>, b: &Tensor<E>, f: impl Fn(E, E) -> E) -> Tensor<E> {
    let data = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map shape")
}

pub fn scale<E: Elem>(a: &Tensor<E>, c: E) -> Tensor<E> {
    a.map(|v| v * c)
}

/// Broadcast-add a length-C vector to every row of an (rows, C) tensor.
pub fn add_row<E: Elem>(x: &Tensor<E>, bias: &Tensor<E>) -> Result<Tensor<E>> {
    let c = x.last_dim();
    if bias.rank() != 1 || bias.numel() != c {
        return Err(Error::ShapeMismatch {
            op: "add_row",
            detail: format!("bias {:?} against rows of width {c}", bias.shape()),
        });
    }
    let bd = bias.data();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        for (o, &b) in row.iter_mut().zip(bd) {
            *o += b;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Column sums of an (rows, C) tensor; gradient counterpart of `add_row`.
pub fn col_sums<E: Elem>(x: &Tensor<E>) -> Tensor<E> {
    let c = x.last_dim();
    let mut out = vec![E::ZERO; c];
    if c > 0 {
        for row in x.data().chunks(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
    }
    Tensor::new(vec![c], out).expect("col_sums shape")
}

pub fn sum_all<E: Elem>(x: &Tensor<E>) -> E {
    let mut s = E::ZERO;
    for &v in x.data() {
        s += v;
    }
    s
}
