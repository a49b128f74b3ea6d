//! Three-phase fit-until-threshold quality control, scene filtering and
//! per-class PSNR statistics.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::image::ImageGrid;
use crate::inr2d::{Arch, ImageFitter, Inr2d};
use crate::seed::item_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Basic,
    Extended,
    Final,
    Failed,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Basic, Phase::Extended, Phase::Final, Phase::Failed];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Basic => "basic",
            Phase::Extended => "extended",
            Phase::Final => "final",
            Phase::Failed => "failed",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QcPolicy {
    pub threshold: f64,
    pub basic_iters: usize,
    pub extended_multiplier: usize,
    pub hard_cap_multiplier: usize,
    /// Early-stop check interval; `None` means `basic_iters / 10`.
    pub check_every: Option<usize>,
    pub lr0: f64,
    pub lr_min: f64,
}

impl Default for QcPolicy {
    fn default() -> Self {
        Self {
            threshold: 30.0,
            basic_iters: 1000,
            extended_multiplier: 3,
            hard_cap_multiplier: 10,
            check_every: None,
            lr0: 1e-3,
            lr_min: 1e-5,
        }
    }
}

impl QcPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold >= 0.0)
            || self.basic_iters == 0
            || self.extended_multiplier < 1
            || self.hard_cap_multiplier < 1
            || self.check_every == Some(0)
            || !(self.lr_min > 0.0)
            || self.lr0 < self.lr_min
        {
            return Err(CoreError::invalid(format!("invalid QC policy {self:?}")));
        }
        Ok(())
    }

    pub fn check_interval(&self) -> usize {
        self.check_every.unwrap_or(self.basic_iters / 10).max(1)
    }

    /// Upper bound on iterations any item can consume.
    pub fn max_iterations(&self) -> usize {
        self.basic_iters * (1 + self.extended_multiplier + self.hard_cap_multiplier)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcRecord {
    pub id: String,
    pub phase: Phase,
    pub iterations: usize,
    pub psnr: f64,
    pub passed: bool,
}

/// Fit `img` under the three-phase policy, seeding initialization with `seed`.
pub fn run_three_phase(
    id: &str,
    img: &ImageGrid,
    arch: Arch,
    policy: &QcPolicy,
    seed: u64,
) -> Result<(Inr2d, QcRecord)> {
    policy.validate()?;
    let init = Inr2d::siren_init(arch, seed)?;
    let mut fitter = ImageFitter::new(&init, img);
    let n0 = policy.basic_iters;
    let thr = policy.threshold;

    fitter.train(n0, policy.lr0, policy.lr_min, None, |_| false)?;
    let mut psnr = fitter.psnr()?;
    let mut phase = Phase::Basic;

    let later = [
        (Phase::Extended, policy.extended_multiplier),
        (Phase::Final, policy.hard_cap_multiplier),
    ];
    for (next, mult) in later {
        if psnr >= thr {
            break;
        }
        fitter.train(
            n0 * mult,
            policy.lr0,
            policy.lr_min,
            Some(policy.check_interval()),
            |p| p >= thr,
        )?;
        psnr = fitter.psnr()?;
        phase = if psnr >= thr { next } else { Phase::Failed };
    }

    let passed = psnr >= thr;
    let record = QcRecord {
        id: id.to_string(),
        phase,
        iterations: fitter.iterations(),
        psnr,
        passed,
    };
    Ok((fitter.inr(), record))
}

/// Run the pipeline over many items on `workers` threads. Each item is seeded
/// with `item_seed(run_seed, id)`, and results come back in input order.
pub fn run_batch(
    items: &[(String, ImageGrid)],
    arch: Arch,
    policy: &QcPolicy,
    run_seed: u64,
    workers: usize,
) -> Vec<Result<(Inr2d, QcRecord)>> {
    parallel_map(items, workers, |(id, img)| {
        run_three_phase(id, img, arch, policy, item_seed(run_seed, id))
    })
}

/// Order-preserving map over `items` using a fixed pool of scoped threads.
pub fn parallel_map<I: Sync, O: Send>(
    items: &[I],
    workers: usize,
    f: impl Fn(&I) -> O + Sync,
) -> Vec<O> {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<O>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let out = f(&items[i]);
                slots.lock().unwrap()[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|o| o.expect("every slot filled"))
        .collect()
}

/// Novel-view quality of one fitted scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneScore {
    pub scene_id: String,
    pub class_id: u32,
    pub psnr: f64,
}

pub const SCENE_MIN_PSNR: f64 = 25.0;
pub const SCENE_MIN_PER_CLASS: usize = 5;

/// Drop scenes below 25 dB, then drop classes left with fewer than 5 scenes.
/// Kept ids are returned in input order.
pub fn filter_scenes(records: &[SceneScore]) -> Vec<String> {
    filter_scenes_with(records, SCENE_MIN_PSNR, SCENE_MIN_PER_CLASS)
}

pub fn filter_scenes_with(records: &[SceneScore], min_psnr: f64, min_per_class: usize) -> Vec<String> {
    let good: Vec<&SceneScore> = records.iter().filter(|r| r.psnr >= min_psnr).collect();
    let mut per_class: BTreeMap<u32, usize> = BTreeMap::new();
    for r in &good {
        *per_class.entry(r.class_id).or_default() += 1;
    }
    good.into_iter()
        .filter(|r| per_class[&r.class_id] >= min_per_class)
        .map(|r| r.scene_id.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class_id: u32,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DatasetStats {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub classes: Vec<ClassStats>,
}

/// Population mean and standard deviation. Values are sorted first so the
/// result does not depend on input order.
fn mean_std(values: &mut [f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-class statistics over `(class id, psnr)` pairs, ordered by class id.
pub fn dataset_stats(records: &[(u32, f64)]) -> DatasetStats {
    let mut by_class: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for &(c, p) in records {
        by_class.entry(c).or_default().push(p);
    }
    let classes = by_class
        .into_iter()
        .map(|(class_id, mut v)| {
            let (mean, std) = mean_std(&mut v);
            ClassStats {
                class_id,
                count: v.len(),
                mean,
                std,
            }
        })
        .collect();
    let mut all: Vec<f64> = records.iter().map(|r| r.1).collect();
    let (mean, std) = mean_std(&mut all);
    DatasetStats {
        count: records.len(),
        mean,
        std,
        classes,
    }
}
