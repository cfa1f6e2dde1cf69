//! Problem sizes shared by the criterion benches.

/// Client count of the timing comparison (100 honest, 15 Byzantine).
pub const CLIENTS: usize = 115;

/// Gradient dimensions swept by the scaling benches.
pub const DIMS: [usize; 3] = [1_000, 10_000, 100_000];
