use rand::Rng;

use super::gaussian::{cholesky, Gaussian, Mixture};
use crate::condition::{Concept, Condition, Context};
use crate::error::{Error, Result};
use crate::rng::{normal, stream, LabRng};

/// Knobs for [`World::build`]. Lengths are in data units.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub seed: u64,
    pub dim: usize,
    pub n_classes: usize,
    pub n_contexts: usize,
    pub n_refs: usize,
    pub components_per_class: usize,
    /// Range of per-axis component standard deviations.
    pub component_std: (f64, f64),
    /// Distance of component means from their class centre, in component stds.
    pub component_spread: f64,
    /// Half-width of the box class centres are drawn from.
    pub class_box: f64,
    /// Range of the subject offset from its class centroid, in component stds.
    pub subject_offset: (f64, f64),
    /// Range of context singular values; the ratio bounds the condition number.
    pub context_scale: (f64, f64),
    pub context_shift: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dim: 2,
            n_classes: 4,
            n_contexts: 3,
            n_refs: 5,
            components_per_class: 2,
            component_std: (0.07, 0.1),
            component_spread: 0.75,
            class_box: 1.1,
            subject_offset: (2.0, 3.0),
            context_scale: (0.7, 1.3),
            context_shift: 0.5,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.dim == 0 {
            return bad("world.d must be positive");
        }
        if self.n_classes < 2 {
            return bad("world.K must be at least 2");
        }
        if self.n_contexts < 1 {
            return bad("world.n_contexts must be at least 1");
        }
        if !(4..=6).contains(&self.n_refs) {
            return bad("world.N_ref must lie in [4, 6]");
        }
        if self.components_per_class == 0 {
            return bad("world.components must be positive");
        }
        let (lo, hi) = self.component_std;
        if !(lo > 0.0 && hi >= lo) {
            return bad("component std range must be positive and ordered");
        }
        let (a, b) = self.subject_offset;
        if !(a >= 0.0 && b >= a) {
            return bad("subject offset range must be non-negative and ordered");
        }
        let (s0, s1) = self.context_scale;
        if !(s0 > 0.0 && s1 >= s0 && s1 / s0 <= 5.0) {
            return bad("context scales must keep the condition number <= 5");
        }
        Ok(())
    }
}

/// `y = A x + b` with cached inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub matrix: Vec<f64>,
    pub offset: Vec<f64>,
    inverse: Vec<f64>,
    log_abs_det: f64,
}

impl Affine {
    pub fn new(matrix: Vec<f64>, offset: Vec<f64>) -> Result<Self> {
        let d = offset.len();
        if matrix.len() != d * d {
            return Err(Error::Dimension(format!("context matrix must be {d}x{d}")));
        }
        let (inverse, det) = invert(&matrix, d)?;
        if det.abs() <= 1e-6 {
            return Err(Error::Numeric(format!("context matrix is near singular (det {det})")));
        }
        Ok(Self {
            matrix,
            offset,
            inverse,
            log_abs_det: det.abs().ln(),
        })
    }

    pub fn identity(d: usize) -> Self {
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            m[i * d + i] = 1.0;
        }
        Self::new(m, vec![0.0; d]).expect("identity is invertible")
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|i| (0..d).map(|k| self.matrix[i * d + k] * x[k]).sum::<f64>() + self.offset[i])
            .collect()
    }

    pub fn invert(&self, y: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let shifted: Vec<f64> = y.iter().zip(&self.offset).map(|(a, b)| a - b).collect();
        (0..d)
            .map(|i| (0..d).map(|k| self.inverse[i * d + k] * shifted[k]).sum())
            .collect()
    }

    pub fn log_abs_det(&self) -> f64 {
        self.log_abs_det
    }
}

/// Gauss-Jordan inverse with partial pivoting; returns `(inverse, det)`.
fn invert(m: &[f64], d: usize) -> Result<(Vec<f64>, f64)> {
    let mut a = m.to_vec();
    let mut inv = vec![0.0; d * d];
    for i in 0..d {
        inv[i * d + i] = 1.0;
    }
    let mut det = 1.0;
    for col in 0..d {
        let pivot = (col..d)
            .max_by(|&r, &s| a[r * d + col].abs().total_cmp(&a[s * d + col].abs()))
            .unwrap();
        if a[pivot * d + col] == 0.0 {
            return Err(Error::Numeric("singular context matrix".into()));
        }
        if pivot != col {
            for k in 0..d {
                a.swap(pivot * d + k, col * d + k);
                inv.swap(pivot * d + k, col * d + k);
            }
            det = -det;
        }
        let p = a[col * d + col];
        det *= p;
        for k in 0..d {
            a[col * d + k] /= p;
            inv[col * d + k] /= p;
        }
        for r in 0..d {
            if r != col {
                let f = a[r * d + col];
                if f != 0.0 {
                    for k in 0..d {
                        a[r * d + k] -= f * a[col * d + k];
                        inv[r * d + k] -= f * inv[col * d + k];
                    }
                }
            }
        }
    }
    Ok((inv, det))
}

/// The rare concept: a shifted copy of one component of `base_class`.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub base_class: usize,
    pub component: usize,
    pub distribution: Gaussian,
    pub references: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub z0: Vec<f64>,
    pub cond: Condition,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub seed: u64,
    dim: usize,
    classes: Vec<Mixture>,
    contexts: Vec<Affine>,
    plain: Affine,
    subject: Option<Subject>,
}

const TAG_GEOMETRY: u64 = 101;
const TAG_SUPPORT: u64 = 102;
const TAG_REFS: u64 = 103;

fn random_orthogonal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let mut q: Vec<Vec<f64>> = Vec::with_capacity(d);
        let mut ok = true;
        for _ in 0..d {
            let mut v: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
            for u in &q {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < 1e-6 {
                ok = false;
                break;
            }
            v.iter_mut().for_each(|x| *x /= n);
            q.push(v);
        }
        if ok {
            return q.into_iter().flatten().collect();
        }
    }
}

/// `Q diag(s) Q^T`.
fn rotate_diag(q: &[f64], s: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = (0..d).map(|k| q[i * d + k] * s[k] * q[j * d + k]).sum();
        }
    }
    out
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn unit<R: Rng + ?Sized>(v: Vec<f64>, rng: &mut R) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 1e-9 {
        return v.into_iter().map(|x| x / n).collect();
    }
    let r: Vec<f64> = (0..v.len()).map(|_| normal(rng)).collect();
    unit(r, rng)
}

/// Empirical lower quantile; `q` in `[0, 1]`.
pub(crate) fn quantile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let idx = ((values.len() - 1) as f64 * q).floor() as usize;
    values[idx]
}

impl World {
    /// Deterministic world from `config.seed`.
    pub fn build(config: &WorldConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut rng = stream(config.seed, TAG_GEOMETRY);
        let (std_lo, std_hi) = config.component_std;
        let classes = loop {
            let classes: Vec<Mixture> = (0..config.n_classes)
                .map(|_| Self::random_class(config, &mut rng))
                .collect::<Result<_>>()?;
            let max_std = classes.iter().map(Mixture::max_std).fold(0.0, f64::max);
            let means: Vec<Vec<f64>> = classes.iter().map(Mixture::mean).collect();
            let separated =
                (0..means.len()).all(|a| (a + 1..means.len()).all(|b| dist(&means[a], &means[b]) >= 6.0 * max_std));
            // Leave room around each class for the subject offset as well.
            let roomy = (0..means.len()).all(|a| {
                (a + 1..means.len())
                    .all(|b| dist(&means[a], &means[b]) >= 2.0 * (config.subject_offset.1 + 3.0) * std_hi)
            });
            if separated && roomy {
                break classes;
            }
        };
        let _ = std_lo;
        let (s0, s1) = config.context_scale;
        let contexts = (0..config.n_contexts)
            .map(|_| {
                let q1 = random_orthogonal(d, &mut rng);
                let q2 = random_orthogonal(d, &mut rng);
                let s: Vec<f64> = (0..d).map(|_| rng.random_range(s0..=s1)).collect();
                // A = Q1 diag(s) Q2^T keeps singular values in [s0, s1].
                let mut m = vec![0.0; d * d];
                for i in 0..d {
                    for j in 0..d {
                        m[i * d + j] = (0..d).map(|k| q1[i * d + k] * s[k] * q2[j * d + k]).sum();
                    }
                }
                let b: Vec<f64> = (0..d)
                    .map(|_| rng.random_range(-config.context_shift..=config.context_shift))
                    .collect();
                Affine::new(m, b)
            })
            .collect::<Result<Vec<_>>>()?;

        let base_class = rng.random_range(0..config.n_classes);
        let component = rng.random_range(0..config.components_per_class);
        let offset_std = rng.random_range(config.subject_offset.0..=config.subject_offset.1);
        let mut world = World {
            seed: config.seed,
            dim: d,
            classes,
            contexts,
            plain: Affine::identity(d),
            subject: None,
        };
        let subject = world.make_subject(config, base_class, component, offset_std)?;
        world.subject = Some(subject);
        Ok(world)
    }

    fn random_class<R: Rng + ?Sized>(config: &WorldConfig, rng: &mut R) -> Result<Mixture> {
        let d = config.dim;
        let (lo, hi) = config.component_std;
        let center: Vec<f64> = (0..d)
            .map(|_| rng.random_range(-config.class_box..=config.class_box))
            .collect();
        let n = config.components_per_class;
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let mut weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        // Renormalise so the weights sum to one to the last bit that matters.
        let fix = 1.0 - weights[1..].iter().sum::<f64>();
        weights[0] = fix;
        let comps = (0..n)
            .map(|_| {
                let stds: Vec<f64> = (0..d).map(|_| rng.random_range(lo..=hi)).collect();
                let q = random_orthogonal(d, rng);
                let var: Vec<f64> = stds.iter().map(|s| s * s).collect();
                let cov = rotate_diag(&q, &var, d);
                let dir = unit((0..d).map(|_| normal(rng)).collect(), rng);
                let shift = if n == 1 { 0.0 } else { config.component_spread * hi };
                let mean = center.iter().zip(&dir).map(|(c, u)| c + shift * u).collect();
                Gaussian::new(mean, symmetrize(cov, d))
            })
            .collect::<Result<Vec<_>>>()?;
        Mixture::new(weights, comps)
    }

    fn make_subject(&self, config: &WorldConfig, k: usize, c: usize, offset_std: f64) -> Result<Subject> {
        let class = &self.classes[k];
        let comp = &class.components()[c];
        let centroid = class.mean();
        let mut rng = stream(config.seed, TAG_REFS);
        let dir = unit(
            comp.mean().iter().zip(&centroid).map(|(a, b)| a - b).collect(),
            &mut rng,
        );
        let sigma = comp.max_std();
        let mean: Vec<f64> = centroid
            .iter()
            .zip(&dir)
            .map(|(m, u)| m + offset_std * sigma * u)
            .collect();
        let distribution = Gaussian::new(mean, comp.cov().to_vec())?;
        let floor = self.support_floor(config.seed, k)?;
        let mut references = Vec::with_capacity(config.n_refs);
        let mut attempts = 0;
        while references.len() < config.n_refs {
            attempts += 1;
            if attempts > 100_000 {
                return Err(Error::Config(
                    "could not place subject references inside class support".into(),
                ));
            }
            let x = distribution.sample(&mut rng);
            if distribution.mahalanobis(&x) <= 3.5 && class.log_density(&x) > floor {
                references.push(x);
            }
        }
        Ok(Subject {
            base_class: k,
            component: c,
            distribution,
            references,
        })
    }

    /// 0.1th percentile of class `k`'s own log-density.
    fn support_floor(&self, seed: u64, k: usize) -> Result<f64> {
        let mut rng = stream(seed, TAG_SUPPORT + k as u64 * 1000);
        let class = &self.classes[k];
        let mut lp: Vec<f64> = (0..10_000)
            .map(|_| class.log_density(&class.sample(&mut rng)))
            .collect();
        Ok(quantile(&mut lp, 0.001))
    }

    /// Assemble a world from explicit parts (used by deserialisation and tests).
    pub fn from_parts(
        seed: u64,
        classes: Vec<Mixture>,
        contexts: Vec<Affine>,
        subject: Option<Subject>,
    ) -> Result<Self> {
        let dim = classes
            .first()
            .map(Mixture::dim)
            .ok_or_else(|| Error::Config("world needs a class".into()))?;
        if classes.iter().any(|c| c.dim() != dim) || contexts.iter().any(|c| c.dim() != dim) {
            return Err(Error::Dimension("world parts disagree on dimension".into()));
        }
        if let Some(s) = &subject {
            if s.base_class >= classes.len() || s.references.iter().any(|r| r.len() != dim) {
                return Err(Error::Config("subject does not fit the world".into()));
            }
        }
        Ok(Self {
            seed,
            dim,
            classes,
            contexts,
            plain: Affine::identity(dim),
            subject,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn n_contexts(&self) -> usize {
        self.contexts.len()
    }

    pub fn classes(&self) -> &[Mixture] {
        &self.classes
    }

    pub fn class(&self, k: usize) -> &Mixture {
        &self.classes[k]
    }

    pub fn contexts(&self) -> &[Affine] {
        &self.contexts
    }

    /// `Plain` followed by every `Ctx(j)`.
    pub fn all_contexts(&self) -> Vec<Context> {
        (0..=self.contexts.len()).map(Context::from_index).collect()
    }

    pub fn subject(&self) -> Result<&Subject> {
        self.subject
            .as_ref()
            .ok_or_else(|| Error::State("world has no registered subject".into()))
    }

    pub fn references(&self) -> Result<&[Vec<f64>]> {
        Ok(&self.subject()?.references)
    }

    pub fn affine(&self, context: Context) -> Result<&Affine> {
        match context {
            Context::Plain => Ok(&self.plain),
            Context::Ctx(j) => self
                .contexts
                .get(j)
                .ok_or_else(|| Error::Range(format!("context {j} not in world ({} contexts)", self.contexts.len()))),
        }
    }

    pub fn context_apply(&self, context: Context, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.affine(context)?.apply(x))
    }

    pub fn context_invert(&self, context: Context, y: &[f64]) -> Result<Vec<f64>> {
        Ok(self.affine(context)?.invert(y))
    }

    /// Exact log-density of `x` under class `k` pushed through `context`.
    pub fn class_log_density(&self, k: usize, context: Context, x: &[f64]) -> Result<f64> {
        let class = self
            .classes
            .get(k)
            .ok_or_else(|| Error::Range(format!("class {k} not in world")))?;
        let a = self.affine(context)?;
        Ok(class.log_density(&a.invert(x)) - a.log_abs_det())
    }

    pub fn sample_class<R: Rng + ?Sized>(&self, k: usize, context: Context, rng: &mut R) -> Result<Vec<f64>> {
        let x = self.classes[k].sample(rng);
        self.context_apply(context, &x)
    }

    pub fn check_condition(&self, cond: Condition) -> Result<()> {
        match cond.concept {
            Concept::Class(k) if k >= self.classes.len() => {
                return Err(Error::Range(format!("class {k} not in world")));
            }
            Concept::Subject if self.subject.is_none() => {
                return Err(Error::State("SUBJECT used before a subject was registered".into()));
            }
            _ => {}
        }
        self.affine(cond.context).map(|_| ())
    }

    /// Uniform over `(class, context)` pairs including `Plain`; each example
    /// has its concept dropped to `Null` with probability `null_prob`.
    pub fn sample_pretrain_batch(&self, n: usize, null_prob: f64, rng: &mut LabRng) -> Vec<TrainExample> {
        let n_ctx = self.contexts.len() + 1;
        (0..n)
            .map(|_| {
                let k = rng.random_range(0..self.classes.len());
                let context = Context::from_index(rng.random_range(0..n_ctx));
                let x = self.classes[k].sample(rng);
                let z0 = self.affine(context).expect("context index in range").apply(&x);
                let drop: f64 = rng.random();
                let concept = if drop < null_prob {
                    Concept::Null
                } else {
                    Concept::Class(k)
                };
                TrainExample {
                    z0,
                    cond: Condition::new(concept, context),
                }
            })
            .collect()
    }

    /// References drawn uniformly with replacement, always in `Plain`.
    pub fn subject_batch(&self, n: usize, rng: &mut LabRng) -> Result<Vec<TrainExample>> {
        let refs = self.references()?;
        Ok((0..n)
            .map(|_| TrainExample {
                z0: refs[rng.random_range(0..refs.len())].clone(),
                cond: Condition::subject(Context::Plain),
            })
            .collect())
    }
}

fn symmetrize(mut cov: Vec<f64>, d: usize) -> Vec<f64> {
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (cov[i * d + j] + cov[j * d + i]);
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    debug_assert!(cholesky(&cov, d).is_ok());
    cov
}
