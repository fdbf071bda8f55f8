//! Budget-constrained geometric allocation of latent dimensions across an
//! HVAE hierarchy.
//!
//! Layer `i` (1-based, 1 = bottom/largest) receives `b (1 - r) r^(i-1) / (1 - r^N)`
//! real dimensions, which sum to the budget `b`. Integer plans are obtained
//! by largest-remainder apportionment so that the budget is met exactly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AllocError {
    #[error("ratio {0} outside (0, 1]")]
    Ratio(f64),
    #[error("budget {budget} cannot give each of {depth} layers at least one dimension")]
    Budget { budget: usize, depth: usize },
    #[error("depth must be at least 1")]
    Depth,
    #[error("real dimensions sum to {sum}, expected budget {budget}")]
    Sum { sum: f64, budget: usize },
    #[error("ratio grid is empty")]
    EmptyGrid,
    #[error("efficacy {value} at l = {at} exceeds declared upper bound {bound}")]
    UpperBound { at: f64, value: f64, bound: f64 },
    #[error("unknown control configuration `{0}`")]
    UnknownControl(String),
    #[error("control name `{0}` is ambiguous")]
    AmbiguousControl(String),
}

/// Integer per-layer dimensions meeting a latent budget exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub budget: usize,
    pub depth: usize,
    /// `None` for hand-specified (control) plans.
    pub ratio: Option<f64>,
    /// `dims[0]` is the bottom (largest, `z_1`) layer.
    pub dims: Vec<usize>,
}

impl AllocationPlan {
    /// Plan from explicit dims; no ratio and no monotonicity requirement.
    pub fn explicit(dims: Vec<usize>) -> Self {
        AllocationPlan { budget: dims.iter().sum(), depth: dims.len(), ratio: None, dims }
    }

    /// Dash-joined dims, e.g. `18-9-5`.
    pub fn label(&self) -> String {
        dims_label(&self.dims)
    }
}

pub fn dims_label(dims: &[usize]) -> String {
    dims.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
}

fn check_inputs(b: usize, n: usize, r: f64) -> Result<(), AllocError> {
    if n == 0 {
        return Err(AllocError::Depth);
    }
    if !(r > 0.0 && r <= 1.0) {
        return Err(AllocError::Ratio(r));
    }
    if b < n {
        return Err(AllocError::Budget { budget: b, depth: n });
    }
    Ok(())
}

/// Real-valued geometric dimensions. `r == 1` is the equal-split limit.
pub fn real_layer_dims(b: usize, n: usize, r: f64) -> Result<Vec<f64>, AllocError> {
    check_inputs(b, n, r)?;
    let b = b as f64;
    if r == 1.0 {
        return Ok(vec![b / n as f64; n]);
    }
    let first = b * (1.0 - r) / (1.0 - r.powi(n as i32));
    Ok((0..n).map(|i| first * r.powi(i as i32)).collect())
}

/// Remainders closer than this are treated as tied.
const REMAINDER_GRID: f64 = 1e-9;

/// Largest-remainder apportionment of `reals` (summing to `b`) into positive
/// integers summing to `b` exactly.
///
/// Floors every value, lifts empty layers to 1, then hands the leftover units
/// to the largest fractional remainders (deeper layer first on ties). If the
/// lift overshoots the budget, units come off the largest layer.
pub fn quantize_dims(reals: &[f64], b: usize) -> Result<Vec<usize>, AllocError> {
    let n = reals.len();
    if n == 0 {
        return Err(AllocError::Depth);
    }
    if b < n {
        return Err(AllocError::Budget { budget: b, depth: n });
    }
    let sum: f64 = reals.iter().sum();
    if (sum - b as f64).abs() > 1e-9 * b as f64 || reals.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(AllocError::Sum { sum, budget: b });
    }

    let mut dims: Vec<usize> = reals.iter().map(|v| (v.floor() as usize).max(1)).collect();
    let assigned: usize = dims.iter().sum();

    if assigned < b {
        let mut order: Vec<(i64, usize)> = reals
            .iter()
            .enumerate()
            .filter(|(_, v)| v.floor() >= 1.0)
            .map(|(i, v)| (((v - v.floor()) / REMAINDER_GRID).round() as i64, i))
            .collect();
        // Descending remainder, then deeper (higher index) layer first.
        order.sort_by(|a, b| b.cmp(a));
        let mut leftover = b - assigned;
        let mut k = 0;
        while leftover > 0 {
            // Remainders of the unlifted layers sum to the leftover, so one pass
            // suffices unless rounding in the input shaved a unit.
            let i = if order.is_empty() { n - 1 } else { order[k % order.len()].1 };
            dims[i] += 1;
            leftover -= 1;
            k += 1;
        }
    } else {
        let mut surplus = assigned - b;
        while surplus > 0 {
            let max = *dims.iter().max().expect("non-empty");
            let i = dims.iter().rposition(|&d| d == max).expect("max present");
            dims[i] -= 1;
            surplus -= 1;
        }
    }

    let strictly_decreasing = reals.windows(2).all(|w| w[0] > w[1]);
    if strictly_decreasing {
        // Only remainder ties inside the tolerance can invert equal floors.
        dims.sort_unstable_by(|a, b| b.cmp(a));
    }
    Ok(dims)
}

/// Integer allocation for budget `b`, depth `n`, ratio `r`.
pub fn allocate(b: usize, n: usize, r: f64) -> Result<AllocationPlan, AllocError> {
    let reals = real_layer_dims(b, n, r)?;
    let dims = quantize_dims(&reals, b)?;
    Ok(AllocationPlan { budget: b, depth: n, ratio: Some(r), dims })
}

/// Utility of a layer as a function of its (real) dimensionality.
///
/// `upper_bound` is checked on every evaluation; `floor` is carried as
/// metadata.
pub struct EfficacyFunction {
    eval: Box<dyn Fn(f64) -> f64 + Send + Sync>,
    pub upper_bound: f64,
    pub floor: f64,
}

impl EfficacyFunction {
    pub fn new(eval: impl Fn(f64) -> f64 + Send + Sync + 'static, upper_bound: f64, floor: f64) -> Self {
        EfficacyFunction { eval: Box::new(eval), upper_bound, floor }
    }

    pub fn eval(&self, l: f64) -> f64 {
        (self.eval)(l)
    }
}

impl std::fmt::Debug for EfficacyFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EfficacyFunction")
            .field("upper_bound", &self.upper_bound)
            .field("floor", &self.floor)
            .finish_non_exhaustive()
    }
}

/// Total efficacy `F(r) = sum_i f(l_i)` over the real-valued dims.
pub fn objective_value(b: usize, n: usize, r: f64, f: &EfficacyFunction) -> Result<f64, AllocError> {
    let dims = real_layer_dims(b, n, r)?;
    let mut total = 0.0;
    for l in dims {
        let v = f.eval(l);
        if v > f.upper_bound {
            return Err(AllocError::UpperBound { at: l, value: v, bound: f.upper_bound });
        }
        total += v;
    }
    Ok(total)
}

/// Grid search result for the best ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSearch {
    pub r_star: f64,
    /// `(ratio, F(ratio))` in grid order.
    pub values: Vec<(f64, f64)>,
}

/// Index of the largest value; values within a relative `1e-12` of the
/// maximum tie, and ties go to the smallest key.
pub fn argmax_smallest_key(points: &[(f64, f64)]) -> Option<usize> {
    let best = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    if !best.is_finite() {
        return points.iter().position(|p| p.1 == best);
    }
    let tol = 1e-12 * best.abs().max(1.0);
    points
        .iter()
        .enumerate()
        .filter(|(_, p)| p.1 >= best - tol)
        .min_by(|a, b| a.1 .0.total_cmp(&b.1 .0))
        .map(|(i, _)| i)
}

/// Evaluates `F` on every grid ratio and returns the maximizer, preferring the
/// smaller ratio (more compression) on ties.
pub fn grid_argmax_r(b: usize, n: usize, grid: &[f64], f: &EfficacyFunction) -> Result<GridSearch, AllocError> {
    if grid.is_empty() {
        return Err(AllocError::EmptyGrid);
    }
    let values = grid
        .iter()
        .map(|&r| objective_value(b, n, r, f).map(|v| (r, v)))
        .collect::<Result<Vec<_>, _>>()?;
    let i = argmax_smallest_key(&values).expect("non-empty grid");
    Ok(GridSearch { r_star: values[i].0, values })
}

/// Image regime a control configuration belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Grayscale,
    Natural,
}

impl std::str::FromStr for Scale {
    type Err = AllocError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "grayscale" | "gray" => Ok(Scale::Grayscale),
            "natural" => Ok(Scale::Natural),
            _ => Err(AllocError::UnknownControl(s.to_string())),
        }
    }
}

/// Hand-specified, non-geometric allocation used as a baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlPlan {
    pub name: String,
    pub dims: Vec<usize>,
}

const CONTROLS: [(&str, [usize; 3], [usize; 3]); 5] = [
    ("Expand-then-Retain", [6, 13, 13], [42, 91, 91]),
    ("Progressive Expansion", [8, 10, 14], [56, 80, 98]),
    ("Expand-then-Compress", [8, 16, 8], [56, 112, 56]),
    ("Stable Allocation", [10, 11, 11], [70, 77, 77]),
    ("Compress-then-Expand", [13, 6, 13], [91, 42, 91]),
];

/// The five control configurations for an image regime.
pub fn control_plans(scale: Scale) -> Vec<ControlPlan> {
    CONTROLS
        .iter()
        .map(|(name, gray, natural)| ControlPlan {
            name: (*name).to_string(),
            dims: match scale {
                Scale::Grayscale => gray.to_vec(),
                Scale::Natural => natural.to_vec(),
            },
        })
        .collect()
}

fn normalize(s: &str) -> String {
    s.chars().filter(char::is_ascii_alphanumeric).map(|c| c.to_ascii_lowercase()).collect()
}

/// Looks up a control by `scale:name`; `name` may be any unambiguous prefix
/// (case and punctuation ignored), e.g. `grayscale:Stable`.
pub fn find_control(spec: &str) -> Result<ControlPlan, AllocError> {
    let (scale, name) = spec.split_once(':').ok_or_else(|| AllocError::UnknownControl(spec.to_string()))?;
    let scale: Scale = scale.parse()?;
    let query = normalize(name);
    if query.is_empty() {
        return Err(AllocError::UnknownControl(spec.to_string()));
    }
    let plans = control_plans(scale);
    if let Some(exact) = plans.iter().find(|p| normalize(&p.name) == query) {
        return Ok(exact.clone());
    }
    let mut hits = plans.into_iter().filter(|p| normalize(&p.name).starts_with(&query));
    match (hits.next(), hits.next()) {
        (Some(p), None) => Ok(p),
        (Some(_), Some(_)) => Err(AllocError::AmbiguousControl(spec.to_string())),
        _ => Err(AllocError::UnknownControl(spec.to_string())),
    }
}
