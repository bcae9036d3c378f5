//! Composite training losses: soft-label cross-entropy, Jensen–Shannon
//! consistency across augmented views, and the 11-superclass behavioral
//! regularizer.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kernels::dense::{
    softmax, softmax_backward, softmax_cross_entropy, validate_distribution_rows,
};
use crate::tensor::Tensor;

/// Number of coarse categories the class axis projects onto.
pub const SUPERCLASS_COUNT: usize = 11;

/// Log arguments are floored here; 0*log(0) is taken as 0.
const LOG_FLOOR: f64 = 1e-12;

/// Partition of the K class labels into 11 superclasses plus an unmapped
/// bucket.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperclassMap {
    class_to_super: Vec<Option<usize>>,
}

impl SuperclassMap {
    /// Build from per-class assignments; -1 marks an unmapped class. A map
    /// with no unmapped classes must cover all 11 superclasses.
    pub fn from_assignments(assignments: &[i64]) -> Result<Self> {
        let mut class_to_super = Vec::with_capacity(assignments.len());
        for (ci, &s) in assignments.iter().enumerate() {
            match s {
                -1 => class_to_super.push(None),
                s if (0..SUPERCLASS_COUNT as i64).contains(&s) => {
                    class_to_super.push(Some(s as usize))
                }
                bad => {
                    return Err(Error::Config(format!(
                        "class {ci}: superclass index {bad} outside -1..={}",
                        SUPERCLASS_COUNT - 1
                    )))
                }
            }
        }
        let map = SuperclassMap { class_to_super };
        // a complete map must hit every superclass, when that's possible
        if map.is_complete() && map.class_count() >= SUPERCLASS_COUNT {
            let sizes = map.superclass_sizes();
            if let Some(empty) = sizes.iter().position(|&n| n == 0) {
                return Err(Error::Config(format!(
                    "complete map leaves superclass {empty} empty"
                )));
            }
        }
        Ok(map)
    }

    /// Parse the tab-separated map file: one `class<TAB>superclass` line per
    /// class, superclass -1 meaning unmapped.
    pub fn load(path: &Path, class_count: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut assignments = vec![i64::MIN; class_count];
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split('\t');
            let parse = |s: Option<&str>| -> Result<i64> {
                s.and_then(|v| v.trim().parse().ok()).ok_or_else(|| {
                    Error::Config(format!(
                        "{}: line {}: expected 'class<TAB>superclass'",
                        path.display(),
                        lineno + 1
                    ))
                })
            };
            let class = parse(parts.next())?;
            let superclass = parse(parts.next())?;
            if class < 0 || class as usize >= class_count {
                return Err(Error::Config(format!(
                    "{}: line {}: class index {class} outside 0..{class_count}",
                    path.display(),
                    lineno + 1
                )));
            }
            assignments[class as usize] = superclass;
        }
        if let Some(missing) = assignments.iter().position(|&a| a == i64::MIN) {
            return Err(Error::Config(format!(
                "{}: class {missing} has no assignment",
                path.display()
            )));
        }
        Self::from_assignments(&assignments)
    }

    pub fn class_count(&self) -> usize {
        self.class_to_super.len()
    }

    pub fn superclass_of(&self, class: usize) -> Option<usize> {
        self.class_to_super.get(class).copied().flatten()
    }

    /// True when every class is mapped.
    pub fn is_complete(&self) -> bool {
        self.class_to_super.iter().all(|s| s.is_some())
    }

    pub fn superclass_sizes(&self) -> [usize; SUPERCLASS_COUNT] {
        let mut sizes = [0usize; SUPERCLASS_COUNT];
        for s in self.class_to_super.iter().flatten() {
            sizes[*s] += 1;
        }
        sizes
    }
}

/// Human reference distribution over the 11 superclasses: either one global
/// row, or one row per true superclass (11 rows).
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceDistribution {
    rows: Vec<[f64; SUPERCLASS_COUNT]>,
}

impl ReferenceDistribution {
    pub fn global(row: [f64; SUPERCLASS_COUNT]) -> Result<Self> {
        Self::from_rows(vec![row])
    }

    pub fn from_rows(rows: Vec<[f64; SUPERCLASS_COUNT]>) -> Result<Self> {
        if rows.len() != 1 && rows.len() != SUPERCLASS_COUNT {
            return Err(Error::Config(format!(
                "reference distribution needs 1 or {} rows, got {}",
                SUPERCLASS_COUNT,
                rows.len()
            )));
        }
        for (i, row) in rows.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&v| v < 0.0) {
                return Err(Error::Config(format!(
                    "reference row {i} is not a distribution (sum {sum})"
                )));
            }
        }
        Ok(ReferenceDistribution { rows })
    }

    /// Parse rows of 11 tab-separated columns.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split('\t')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| {
                    Error::Config(format!("{}: line {}: {e}", path.display(), lineno + 1))
                })?;
            if vals.len() != SUPERCLASS_COUNT {
                return Err(Error::Config(format!(
                    "{}: line {}: expected {} columns, got {}",
                    path.display(),
                    lineno + 1,
                    SUPERCLASS_COUNT,
                    vals.len()
                )));
            }
            let mut row = [0.0; SUPERCLASS_COUNT];
            row.copy_from_slice(&vals);
            rows.push(row);
        }
        Self::from_rows(rows)
    }

    /// Reference row for a sample whose true superclass mass is
    /// `true_weights` (the projection of its soft label). A global reference
    /// ignores the weights; a conditioned reference returns the
    /// weight-mixture of its rows, which reduces to plain row lookup for
    /// one-hot labels.
    pub fn row_for(&self, true_weights: &[f64; SUPERCLASS_COUNT]) -> [f64; SUPERCLASS_COUNT] {
        if self.rows.len() == 1 {
            return self.rows[0];
        }
        let mut out = [0.0; SUPERCLASS_COUNT];
        for (s, w) in true_weights.iter().enumerate() {
            for (o, r) in out.iter_mut().zip(&self.rows[s]) {
                *o += w * r;
            }
        }
        out
    }
}

fn floored_ln(x: f64) -> f64 {
    x.max(LOG_FLOOR).ln()
}

/// Jensen–Shannon consistency over a batch of three probability
/// distributions (N, K, 1, 1):
/// m = (p1+p2+p3)/3, loss = mean_n (KL(p1||m) + KL(p2||m) + KL(p3||m))/3.
/// Returns the loss and its gradient with respect to each input.
pub fn js_consistency(
    p_clean: &Tensor,
    p_aug1: &Tensor,
    p_aug2: &Tensor,
) -> Result<(f64, [Tensor; 3])> {
    p_clean.check_same_shape("js_consistency", p_aug1)?;
    p_clean.check_same_shape("js_consistency", p_aug2)?;
    for p in [p_clean, p_aug1, p_aug2] {
        validate_distribution_rows("js_consistency", p)?;
    }
    let (n, k) = (p_clean.n(), p_clean.c());
    let inputs = [p_clean, p_aug1, p_aug2];
    let mut grads = [
        Tensor::zeros(p_clean.shape()),
        Tensor::zeros(p_clean.shape()),
        Tensor::zeros(p_clean.shape()),
    ];
    let mut loss = 0.0;
    for ni in 0..n {
        for ki in 0..k {
            let idx = ni * k + ki;
            let m = (p_clean.data()[idx] + p_aug1.data()[idx] + p_aug2.data()[idx]) / 3.0;
            let ln_m = floored_ln(m);
            for (a, input) in inputs.iter().enumerate() {
                let p = input.data()[idx];
                if p > 0.0 {
                    loss += p * (floored_ln(p) - ln_m);
                }
                // d loss / d p = ln(p/m)/3 per sample, averaged over batch
                grads[a].data_mut()[idx] = (floored_ln(p) - ln_m) / (3.0 * n as f64);
            }
        }
    }
    loss /= 3.0 * n as f64;
    Ok((loss, grads))
}

/// Project one K-distribution onto the 11 superclasses: per-superclass
/// sums, unmapped mass dropped and the result renormalized. If the mapped
/// mass is below 1e-9 the projection falls back to the uniform 11-vector.
pub fn superclass_project(probs: &[f64], map: &SuperclassMap) -> Vec<f64> {
    let mut sums = vec![0.0; SUPERCLASS_COUNT];
    let mut mass = 0.0;
    for (ci, &p) in probs.iter().enumerate() {
        if let Some(s) = map.superclass_of(ci) {
            sums[s] += p;
            mass += p;
        }
    }
    if mass < 1e-9 {
        return vec![1.0 / SUPERCLASS_COUNT as f64; SUPERCLASS_COUNT];
    }
    for v in &mut sums {
        *v /= mass;
    }
    sums
}

/// Backward through [`superclass_project`]: for a mapped class k in
/// superclass s, d_p_k = (d_q_s - sum_j d_q_j q_j) / mass; unmapped classes
/// and the uniform fallback carry no gradient.
pub fn superclass_project_backward(
    probs: &[f64],
    map: &SuperclassMap,
    projected: &[f64],
    d_projected: &[f64],
) -> Vec<f64> {
    let mass: f64 = probs
        .iter()
        .enumerate()
        .filter(|(ci, _)| map.superclass_of(*ci).is_some())
        .map(|(_, &p)| p)
        .sum();
    let mut d_probs = vec![0.0; probs.len()];
    if mass < 1e-9 {
        return d_probs; // constant fallback
    }
    let dot: f64 = d_projected.iter().zip(projected).map(|(d, q)| d * q).sum();
    for (ci, d) in d_probs.iter_mut().enumerate() {
        if let Some(s) = map.superclass_of(ci) {
            *d = (d_projected[s] - dot) / mass;
        }
    }
    d_probs
}

/// Mean cross-entropy between projected predictions and the reference,
/// both (N, 11, 1, 1). Returns the loss and d_projected.
pub fn superclass_loss(projected: &Tensor, reference: &Tensor) -> Result<(f64, Tensor)> {
    projected.check_same_shape("superclass_loss", reference)?;
    validate_distribution_rows("superclass_loss", projected)?;
    validate_distribution_rows("superclass_loss", reference)?;
    let (n, k) = (projected.n(), projected.c());
    let mut loss = 0.0;
    let mut d_projected = Tensor::zeros(projected.shape());
    for i in 0..n * k {
        let q = projected.data()[i];
        let r = reference.data()[i];
        if r > 0.0 {
            loss -= r * floored_ln(q);
        }
        d_projected.data_mut()[i] = if q > LOG_FLOOR {
            -r / q / n as f64
        } else {
            0.0
        };
    }
    loss /= n as f64;
    Ok((loss, d_projected))
}

/// Non-negative weights of the three loss components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_main: f64,
    pub w_js: f64,
    pub w_super: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_main: 1.0,
            w_js: 12.0,
            w_super: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.w_main < 0.0 || self.w_js < 0.0 || self.w_super < 0.0 {
            return Err(Error::InvalidArgument {
                op: "total_loss",
                detail: "loss weights must be non-negative".into(),
            });
        }
        Ok(())
    }
}

/// Per-component values of one composite loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub main: f64,
    pub js: f64,
    pub superclass: f64,
}

/// Gradients of the composite loss with respect to each logit stream.
#[derive(Debug, Clone)]
pub struct TotalLossGrads {
    pub d_logits_clean: Tensor,
    pub d_logits_aug: Option<(Tensor, Tensor)>,
}

/// Superclass regularizer inputs: the map plus the reference distribution.
#[derive(Debug, Clone, Copy)]
pub struct SuperclassTarget<'a> {
    pub map: &'a SuperclassMap,
    pub reference: &'a ReferenceDistribution,
}

/// Composite loss w_main*CE + w_js*JS + w_super*SuperCE over one batch.
///
/// `logits_aug` carries the two augmented-view logit batches; without them
/// the JS term is 0. The superclass term projects the clean softmax onto
/// the 11 superclasses and scores it against the reference row selected by
/// each sample's (soft) label.
pub fn total_loss(
    logits_clean: &Tensor,
    soft_labels: &Tensor,
    logits_aug: Option<(&Tensor, &Tensor)>,
    superclass: Option<SuperclassTarget<'_>>,
    weights: &LossWeights,
) -> Result<(LossBreakdown, TotalLossGrads)> {
    weights.validate()?;
    let (n, k) = (logits_clean.n(), logits_clean.c());
    let (main, d_main) = softmax_cross_entropy(logits_clean, soft_labels)?;
    let mut d_clean = d_main.scale(weights.w_main);

    let mut js = 0.0;
    let mut d_aug = None;
    if let Some((logits_a1, logits_a2)) = logits_aug {
        logits_clean.check_same_shape("total_loss", logits_a1)?;
        logits_clean.check_same_shape("total_loss", logits_a2)?;
        let p_c = softmax(logits_clean);
        let p_1 = softmax(logits_a1);
        let p_2 = softmax(logits_a2);
        let (js_val, [d_pc, d_p1, d_p2]) = js_consistency(&p_c, &p_1, &p_2)?;
        js = js_val;
        let d_clean_js = softmax_backward(&p_c, &d_pc)?;
        d_clean = d_clean.add(&d_clean_js.scale(weights.w_js))?;
        let d_a1 = softmax_backward(&p_1, &d_p1)?.scale(weights.w_js);
        let d_a2 = softmax_backward(&p_2, &d_p2)?.scale(weights.w_js);
        d_aug = Some((d_a1, d_a2));
    }

    let mut superclass_val = 0.0;
    if let Some(target) = superclass {
        if target.map.class_count() != k {
            return Err(Error::ShapeMismatch {
                op: "total_loss",
                detail: format!(
                    "superclass map covers {} classes, logits have {k}",
                    target.map.class_count()
                ),
            });
        }
        let p_c = softmax(logits_clean);
        let mut projected = Tensor::zeros([n, SUPERCLASS_COUNT, 1, 1]);
        let mut reference = Tensor::zeros([n, SUPERCLASS_COUNT, 1, 1]);
        for ni in 0..n {
            let p_row = &p_c.data()[ni * k..(ni + 1) * k];
            let q = superclass_project(p_row, target.map);
            projected.data_mut()[ni * SUPERCLASS_COUNT..(ni + 1) * SUPERCLASS_COUNT]
                .copy_from_slice(&q);
            let label_row = &soft_labels.data()[ni * k..(ni + 1) * k];
            let label_super = superclass_project(label_row, target.map);
            let mut weights_arr = [0.0; SUPERCLASS_COUNT];
            weights_arr.copy_from_slice(&label_super);
            let r = target.reference.row_for(&weights_arr);
            reference.data_mut()[ni * SUPERCLASS_COUNT..(ni + 1) * SUPERCLASS_COUNT]
                .copy_from_slice(&r);
        }
        let (val, d_projected) = superclass_loss(&projected, &reference)?;
        superclass_val = val;
        let mut d_p = Tensor::zeros(p_c.shape());
        for ni in 0..n {
            let p_row = &p_c.data()[ni * k..(ni + 1) * k];
            let q_row = &projected.data()[ni * SUPERCLASS_COUNT..(ni + 1) * SUPERCLASS_COUNT];
            let dq_row = &d_projected.data()[ni * SUPERCLASS_COUNT..(ni + 1) * SUPERCLASS_COUNT];
            let d_row = superclass_project_backward(p_row, target.map, q_row, dq_row);
            d_p.data_mut()[ni * k..(ni + 1) * k].copy_from_slice(&d_row);
        }
        let d_clean_super = softmax_backward(&p_c, &d_p)?;
        d_clean = d_clean.add(&d_clean_super.scale(weights.w_super))?;
    }

    let breakdown = LossBreakdown {
        total: weights.w_main * main + weights.w_js * js + weights.w_super * superclass_val,
        main,
        js,
        superclass: superclass_val,
    };
    Ok((
        breakdown,
        TotalLossGrads {
            d_logits_clean: d_clean,
            d_logits_aug: d_aug,
        },
    ))
}
