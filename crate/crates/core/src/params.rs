//! Named parameter blocks shared by the optimizer, checkpoints and gradient checks.

use crate::tensor::Matrix;

pub trait ParamBlocks {
    /// Blocks in a fixed order with stable names.
    fn blocks(&self) -> Vec<(String, &Matrix)>;

    /// Same order as [`ParamBlocks::blocks`].
    fn blocks_mut(&mut self) -> Vec<&mut Matrix>;

    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        for b in z.blocks_mut() {
            b.fill(0.0);
        }
        z
    }

    fn accumulate(&mut self, other: &Self, scale: f64) {
        let others: Vec<Matrix> = other.blocks().into_iter().map(|(_, m)| m.clone()).collect();
        for (mine, theirs) in self.blocks_mut().into_iter().zip(&others) {
            mine.axpy(scale, theirs);
        }
    }

    fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, m)| m.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.blocks().iter().all(|(_, m)| m.is_finite())
    }
}
