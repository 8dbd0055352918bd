//! Randomized gradient verification sweeps.
//!
//! [`op_gradient_sweep`] builds a small random graph around every operation
//! kind and compares analytic gradients against central finite differences.
//! Used by the test suite and the acceptance gate; exposed so downstream
//! users can re-verify the engine on their own platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{grad_check, MaskKind, NodeId, Tape, Tensor};

const FD_STEP: f64 = 1e-5;

fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

/// Random tensor with entries bounded away from zero, for kinked ops.
fn rand_tensor_off_kink(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.gen_range(0.1..1.2)
        })
        .collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

/// Random matrix whose columns have a clear top-2 gap, so finite
/// differences cannot flip an argmax.
fn rand_tensor_max_safe(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    loop {
        let t = rand_tensor(vec![rows, cols], rng);
        let mut ok = true;
        for c in 0..cols {
            let mut col: Vec<f64> = (0..rows).map(|r| t.data()[r * cols + c]).collect();
            col.sort_by(|a, b| b.partial_cmp(a).unwrap());
            if rows > 1 && col[0] - col[1] < 100.0 * FD_STEP {
                ok = false;
                break;
            }
        }
        if ok {
            return t;
        }
    }
}

/// Reduce any tensor to a scalar with data-dependent weights so that
/// gradients are non-uniform.
fn weighted_sum(tape: &mut Tape, id: NodeId, rng: &mut ChaCha8Rng) -> Result<NodeId> {
    let shape = tape.value(id).shape().to_vec();
    let w = tape.constant(rand_tensor(shape.clone(), rng));
    let prod = tape.mul(id, w)?;
    let mut cur = prod;
    while tape.value(cur).numel() > 1 || tape.value(cur).shape().len() > 1 {
        cur = tape.sum_axis(cur, 0)?;
    }
    Ok(cur)
}

/// Which operation a sweep case exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpCase {
    MatMul,
    Add,
    AddRow,
    Scale,
    Mul,
    Concat0,
    Concat1,
    Slice0,
    Slice1,
    Gather,
    Sum0,
    Sum1,
    Mean0,
    Mean1,
    Max,
    SoftmaxDense,
    SoftmaxCausal,
    LayerNorm,
    Relu,
    Gelu,
    Sigmoid,
    Transpose,
    Reshape,
    CrossEntropy,
}

impl OpCase {
    pub const ALL: [OpCase; 24] = [
        OpCase::MatMul,
        OpCase::Add,
        OpCase::AddRow,
        OpCase::Scale,
        OpCase::Mul,
        OpCase::Concat0,
        OpCase::Concat1,
        OpCase::Slice0,
        OpCase::Slice1,
        OpCase::Gather,
        OpCase::Sum0,
        OpCase::Sum1,
        OpCase::Mean0,
        OpCase::Mean1,
        OpCase::Max,
        OpCase::SoftmaxDense,
        OpCase::SoftmaxCausal,
        OpCase::LayerNorm,
        OpCase::Relu,
        OpCase::Gelu,
        OpCase::Sigmoid,
        OpCase::Transpose,
        OpCase::Reshape,
        OpCase::CrossEntropy,
    ];

    fn leaves(self, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        match self {
            OpCase::MatMul => vec![
                rand_tensor(vec![3, 4], rng),
                rand_tensor(vec![4, 2], rng),
            ],
            OpCase::Add | OpCase::Mul => vec![
                rand_tensor(vec![3, 4], rng),
                rand_tensor(vec![3, 4], rng),
            ],
            OpCase::AddRow => vec![rand_tensor(vec![3, 4], rng), rand_tensor(vec![4], rng)],
            OpCase::Scale
            | OpCase::Sum0
            | OpCase::Sum1
            | OpCase::Mean0
            | OpCase::Mean1
            | OpCase::SoftmaxDense
            | OpCase::Gelu
            | OpCase::Sigmoid
            | OpCase::Transpose
            | OpCase::Reshape => vec![rand_tensor(vec![3, 4], rng)],
            OpCase::Concat0 | OpCase::Concat1 => vec![
                rand_tensor(vec![2, 3], rng),
                rand_tensor(vec![2, 3], rng),
            ],
            OpCase::Slice0 | OpCase::Slice1 => vec![rand_tensor(vec![4, 4], rng)],
            OpCase::Gather => vec![rand_tensor(vec![5, 3], rng)],
            OpCase::Max => vec![rand_tensor_max_safe(4, 3, rng)],
            OpCase::SoftmaxCausal => vec![rand_tensor(vec![4, 4], rng)],
            OpCase::LayerNorm => vec![
                rand_tensor(vec![3, 4], rng),
                rand_tensor(vec![4], rng),
                rand_tensor(vec![4], rng),
            ],
            OpCase::Relu => vec![rand_tensor_off_kink(vec![3, 4], rng)],
            OpCase::CrossEntropy => vec![rand_tensor(vec![5], rng)],
        }
    }

    fn build(self, tape: &mut Tape, ids: &[NodeId], pick: usize) -> Result<NodeId> {
        match self {
            OpCase::MatMul => tape.matmul(ids[0], ids[1]),
            OpCase::Add => tape.add(ids[0], ids[1]),
            OpCase::AddRow => tape.add_row(ids[0], ids[1]),
            OpCase::Scale => tape.scale(ids[0], -1.7),
            OpCase::Mul => tape.mul(ids[0], ids[1]),
            OpCase::Concat0 => tape.concat(ids, 0),
            OpCase::Concat1 => tape.concat(ids, 1),
            OpCase::Slice0 => tape.slice(ids[0], 0, 1, 2),
            OpCase::Slice1 => tape.slice(ids[0], 1, 1, 2),
            OpCase::Gather => tape.gather(ids[0], pick % 5),
            OpCase::Sum0 => tape.sum_axis(ids[0], 0),
            OpCase::Sum1 => tape.sum_axis(ids[0], 1),
            OpCase::Mean0 => tape.mean_axis(ids[0], 0),
            OpCase::Mean1 => tape.mean_axis(ids[0], 1),
            OpCase::Max => tape.max_axis0(ids[0]),
            OpCase::SoftmaxDense => tape.softmax(ids[0], MaskKind::Dense),
            OpCase::SoftmaxCausal => tape.softmax(ids[0], MaskKind::Causal),
            OpCase::LayerNorm => tape.layer_norm(ids[0], ids[1], ids[2], 1e-5),
            OpCase::Relu => tape.relu(ids[0]),
            OpCase::Gelu => tape.gelu(ids[0]),
            OpCase::Sigmoid => tape.sigmoid(ids[0]),
            OpCase::Transpose => tape.transpose(ids[0]),
            OpCase::Reshape => tape.reshape(ids[0], vec![4, 3]),
            OpCase::CrossEntropy => tape.cross_entropy(ids[0], pick % 5),
        }
    }
}

/// Finite-difference check of one op kind on one random instance.
/// Returns the max relative error over all leaf entries.
pub fn check_op(case: OpCase, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(case as u64));
    let leaves = case.leaves(&mut rng);
    let pick = rng.gen_range(0..100usize);
    let tail_seed: u64 = rng.gen();
    grad_check(
        move |tape, ids| {
            let out = case.build(tape, ids, pick)?;
            let mut tail_rng = ChaCha8Rng::seed_from_u64(tail_seed);
            weighted_sum(tape, out, &mut tail_rng)
        },
        &leaves,
        FD_STEP,
    )
}

/// Run every op kind across `seeds` random instances. Returns the worst
/// relative error observed.
pub fn op_gradient_sweep(seeds: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for case in OpCase::ALL {
        for seed in 0..seeds {
            worst = worst.max(check_op(case, seed)?);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_fd_check_on_a_few_seeds() {
        for case in OpCase::ALL {
            for seed in 0..3 {
                let err = check_op(case, seed).unwrap();
                assert!(err < 1e-4, "{case:?} seed {seed}: rel err {err}");
            }
        }
    }
}
