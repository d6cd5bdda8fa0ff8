//! Small 3D encoder-decoder segmentation network with analytic gradients.
//!
//! The network is generic over [`Scalar`] so that training runs in `f32`
//! while gradient checks run the identical code path in `f64`.

pub mod checkpoint;
pub mod gradcheck;
pub mod ops;
pub mod unet;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader};
pub use unet::{
    adam_step, forward, init, loss, loss_and_grad, AdamHyper, Batch, Gradients, Logits, LossValue, ParamStore, Tensor,
    UNetConfig, DICE_SMOOTH,
};

use std::cell::RefCell;
use std::fmt::Debug;

/// Floating point element usable by the network kernels.
pub trait Scalar: num_traits::Float + Debug + Default + Send + Sync + 'static {
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Run `f` with this thread's reusable scratch buffer `slot` (0 or 1).
    /// Nested use of the same slot panics.
    fn with_scratch<R>(slot: usize, f: impl FnOnce(&mut Vec<Self>) -> R) -> R;

    /// `C = A * B + beta * C` with explicit `[row, col]` strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: [usize; 2],
        b: &[Self],
        b_strides: [usize; 2],
        beta: Self,
        c: &mut [Self],
        c_strides: [usize; 2],
    );
}

fn check_extent(len: usize, rows: usize, cols: usize, strides: [usize; 2], what: &str) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * strides[0] + (cols - 1) * strides[1];
    assert!(last < len, "gemm operand {what} out of bounds ({last} >= {len})");
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
            fn with_scratch<R>(slot: usize, f: impl FnOnce(&mut Vec<Self>) -> R) -> R {
                thread_local! {
                    static SCRATCH: [RefCell<Vec<$t>>; 2] = const { [RefCell::new(Vec::new()), RefCell::new(Vec::new())] };
                }
                SCRATCH.with(|s| f(&mut s[slot].borrow_mut()))
            }

            #[inline]
            fn of_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: [usize; 2],
                b: &[Self],
                b_strides: [usize; 2],
                beta: Self,
                c: &mut [Self],
                c_strides: [usize; 2],
            ) {
                check_extent(a.len(), m, k, a_strides, "A");
                check_extent(b.len(), k, n, b_strides, "B");
                check_extent(c.len(), m, n, c_strides, "C");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every index touched by the kernel was bounds-checked above.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides[0] as isize,
                        a_strides[1] as isize,
                        b.as_ptr(),
                        b_strides[0] as isize,
                        b_strides[1] as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_strides[0] as isize,
                        c_strides[1] as isize,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);
