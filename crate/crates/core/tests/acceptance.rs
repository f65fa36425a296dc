//! Acceptance gate: one check per criterion, each printing a PASS/FAIL line.
//! Runs without the test harness so the lines are never captured.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::panic;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use privsynth::classes::{class_index, ClassCondition};
use privsynth::classifier::{
    binary_cross_entropy, train_classifier, ClassifierConfig, LabeledImage, PlateauAction, PlateauSchedule,
};
use privsynth::curation::{curate, split_by_patient, CurationConfig, ImageRecord};
use privsynth::diffusion::{forward_noise, make_schedule, DiffusionConfig, ScheduleKind};
use privsynth::eval::compute_auc;
use privsynth::image_io::GrayImage;
use privsynth::matcher::{evaluate_matcher, index_images, train_matcher, MatcherConfig, PatientImage};
use privsynth::pggan::{projection_logit, wgan_gp_loss};
use privsynth::pipeline::{run_pipeline, ExperimentConfig, RunOutcome};
use privsynth::privacy::{
    record_histogram, sample_anonymous_dataset, GeneratorKind, ImageGenerator, MatcherOracle, SamplingPlan,
};
use privsynth::toy::{render_corpus, render_image, Signature, ToySample, ToySpec};
use privsynth::Result;

fn verdict(n: u32, name: &str, ok: bool, detail: &str) {
    println!("ACCEPTANCE criterion {n} [{name}]: {} ({detail})", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} failed: {detail}");
}

/// Pairwise O(n^2) AUC: wins count 1, ties 1/2.
fn brute_force_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / pairs as f64
}

fn criterion_1_auc_matches_pairwise_oracle() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut tied = 0;
    for _ in 0..1000 {
        let n = rng.random_range(2..=200);
        // a coarse score grid forces ties
        let levels = rng.random_range(2..=40);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let distinct: HashSet<u64> = scores.iter().map(|s| s.to_bits()).collect();
        if distinct.len() < n {
            tied += 1;
        }
        let diff = (compute_auc(&scores, &labels).unwrap() - brute_force_auc(&scores, &labels)).abs();
        worst = worst.max(diff);
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        1,
        "AUC oracle equivalence",
        worst <= 1e-12 && tied > 0 && secs < 60.0,
        &format!("max |diff| {worst:e} over 1000 instances, {tied} with ties, {secs:.2}s"),
    );
}

fn random_catalog(rng: &mut ChaCha8Rng) -> Vec<ImageRecord> {
    let patients = rng.random_range(300..600);
    let classes = [0usize, 1, 4, 7, 14];
    let mut out = Vec::new();
    for p in 0..patients {
        let age = rng.random_range(5..90u32);
        let n = rng.random_range(1..=8u32);
        let mut followups: Vec<u32> = (0..12).collect();
        followups.shuffle(rng);
        for &fu in &followups[..n as usize] {
            let mut labels = BTreeSet::from([*classes.choose(rng).unwrap()]);
            if rng.random_bool(0.15) {
                labels.insert(*classes.choose(rng).unwrap());
            }
            out.push(ImageRecord {
                image_id: format!("{p:05}_{fu:03}.png"),
                patient_id: format!("{p}"),
                follow_up_index: fu,
                patient_age: age,
                labels,
                image_path: PathBuf::from("unused"),
            });
        }
    }
    out.shuffle(rng);
    out
}

/// Independent statement of the curation rules.
fn expected_curation(records: &[ImageRecord], cfg: &CurationConfig) -> BTreeSet<String> {
    let mut by_patient: BTreeMap<&str, Vec<&ImageRecord>> = BTreeMap::new();
    for r in records {
        if r.labels.len() == 1 && r.patient_age > cfg.min_age_exclusive {
            by_patient.entry(&r.patient_id).or_default().push(r);
        }
    }
    let mut keep = BTreeSet::new();
    for recs in by_patient.values_mut() {
        recs.sort_by_key(|r| (r.follow_up_index, r.image_id.clone()));
        keep.extend(recs.iter().take(cfg.max_followups_per_patient).map(|r| r.image_id.clone()));
    }
    keep
}

fn criterion_2_curation_and_split_properties() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_pp = 0.0f64;
    let mut failures = Vec::new();
    for i in 0..100 {
        let records = random_catalog(&mut rng);
        let cfg = CurationConfig {
            seed: i,
            ..CurationConfig::default()
        };
        let curated = curate(&records, &cfg);
        let ids: BTreeSet<String> = curated.iter().map(|r| r.image_id.clone()).collect();
        if ids != expected_curation(&records, &cfg) || ids.len() != curated.len() {
            failures.push(format!("catalog {i}: curated set differs from the rules"));
        }
        let mut per_patient: HashMap<&str, usize> = HashMap::new();
        for r in &curated {
            *per_patient.entry(&r.patient_id).or_default() += 1;
            if r.labels.len() != 1 || r.patient_age <= 21 {
                failures.push(format!("catalog {i}: {} violates a rule", r.image_id));
            }
        }
        if per_patient.values().any(|&n| n > 5) {
            failures.push(format!("catalog {i}: a patient keeps more than 5 follow-ups"));
        }

        let split = split_by_patient(&curated, &cfg).unwrap();
        let sets: Vec<HashSet<&str>> = split
            .subsets()
            .iter()
            .map(|s| s.iter().map(|r| r.patient_id.as_str()).collect())
            .collect();
        if !sets[0].is_disjoint(&sets[1]) || !sets[0].is_disjoint(&sets[2]) || !sets[1].is_disjoint(&sets[2]) {
            failures.push(format!("catalog {i}: a patient spans subsets"));
        }
        if split.len() != curated.len() {
            failures.push(format!("catalog {i}: split lost records"));
        }
        for (subset, target) in split.subsets().iter().zip(cfg.split_ratio) {
            let pp = 100.0 * (subset.len() as f64 / curated.len() as f64 - target).abs();
            worst_pp = worst_pp.max(pp);
        }
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        2,
        "curation and split properties",
        failures.is_empty() && worst_pp <= 2.0 && secs < 60.0,
        &format!(
            "100 catalogs, worst ratio deviation {worst_pp:.2} pp, {} rule violations, {secs:.2}s",
            failures.len()
        ),
    );
    assert!(failures.is_empty(), "{failures:?}");
}

fn criterion_3_diffusion_identities() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let normal = rand_distr::StandardNormal;
    let mut worst_closed = 0.0f64;
    let mut product_exact = true;
    let mut configs = Vec::new();
    for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
        for steps in [10, 100, 1000] {
            configs.push(DiffusionConfig {
                schedule_kind: kind,
                num_steps: steps,
                ..DiffusionConfig::reference()
            });
        }
    }
    for cfg in &configs {
        let sch = make_schedule(cfg).unwrap();
        // the cumulative product, recomputed term by term
        let mut prod = 1.0f64;
        for (t, &b) in sch.betas.iter().enumerate() {
            prod *= 1.0 - b;
            product_exact &= prod == sch.alphas_cumprod[t];
        }
        for _ in 0..50 {
            let t = rng.random_range(0..cfg.num_steps);
            let n = rng.random_range(1..64);
            let x0: Vec<f64> = (0..n).map(|_| rng.sample(normal)).collect();
            let eps: Vec<f64> = (0..n).map(|_| rng.sample(normal)).collect();
            let a = sch.alphas_cumprod[t];
            let got = forward_noise(&x0, t, &eps, &sch).unwrap();
            for i in 0..n {
                let want = a.sqrt() * x0[i] + (1.0 - a).sqrt() * eps[i];
                worst_closed = worst_closed.max((got[i] - want).abs());
            }
        }
    }
    // unit-variance latent and noise stay unit variance at every step
    let sch = make_schedule(&DiffusionConfig::reference()).unwrap();
    let mut worst_var = 0.0f64;
    for t in [0, 250, 500, 999] {
        let x0: Vec<f64> = (0..10_000).map(|_| rng.sample(normal)).collect();
        let eps: Vec<f64> = (0..10_000).map(|_| rng.sample(normal)).collect();
        let xt = forward_noise(&x0, t, &eps, &sch).unwrap();
        let mean = xt.iter().sum::<f64>() / xt.len() as f64;
        let var = xt.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (xt.len() - 1) as f64;
        worst_var = worst_var.max((var - 1.0).abs());
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        3,
        "diffusion identities",
        worst_closed <= 1e-12 && product_exact && worst_var <= 0.05 && secs < 60.0,
        &format!(
            "closed-form max |diff| {worst_closed:e}, product identity exact: {product_exact}, \
             variance deviation {worst_var:.4}, {secs:.2}s"
        ),
    );
}

fn criterion_4_wgan_gp_and_projection_fixtures() {
    let t = Instant::now();
    let mut checks = Vec::new();
    // D = mean(fake) - mean(real) + 10 * mean((g - 1)^2), G = -mean(fake)
    let l = wgan_gp_loss(&[1.0], &[-1.0], &[1.0], 10.0).unwrap();
    checks.push(("real 1, fake -1, unit gradient", l.discriminator == -2.0 && l.generator == 1.0 && l.penalty == 0.0));
    let l = wgan_gp_loss(&[0.5, 1.5], &[0.0, -1.0], &[1.0, 1.0, 1.0], 10.0).unwrap();
    checks.push(("unit gradients give no penalty", l.penalty == 0.0 && l.discriminator == -1.5));
    // gradient norms 0 and 2: each deviates by 1, penalty mean 1, weighted 10
    let l = wgan_gp_loss(&[2.0], &[1.0], &[0.0, 2.0], 10.0).unwrap();
    checks.push(("coefficient 10 on the penalty", l.penalty == 1.0 && l.discriminator == 9.0 && l.generator == -1.0));
    let l = wgan_gp_loss(&[0.25], &[0.75], &[1.5], 10.0).unwrap();
    checks.push(("half-unit deviation", l.discriminator == 0.5 + 10.0 * 0.25));

    checks.push(("projection by hand", projection_logit(&[1.0, 2.0], &[0.5, 0.5], 0.0).unwrap() == 1.5));
    checks.push(("zero embedding", projection_logit(&[3.0, -4.0], &[0.0, 0.0], 0.7).unwrap() == 0.7));
    checks.push(("orthogonal", projection_logit(&[1.0, 0.0], &[0.0, 5.0], -2.0).unwrap() == -2.0));
    checks.push(("dimension mismatch", projection_logit(&[1.0], &[1.0, 2.0], 0.0).is_err()));
    let secs = t.elapsed().as_secs_f64();
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    verdict(
        4,
        "WGAN-GP and projection formulas",
        failed.is_empty() && secs < 1.0,
        &format!("{} fixtures, failed {failed:?}, {secs:.4}s", checks.len()),
    );
}

fn patient_items(samples: &[ToySample]) -> Vec<PatientImage<'_>> {
    samples
        .iter()
        .map(|s| PatientImage {
            patient_id: &s.patient_id,
            image: &s.image,
        })
        .collect()
}

/// Planted duplicates of indexed real images among fresh toy images of
/// unseen patients.
struct PlantedGenerator {
    spec: ToySpec,
    real_by_class: BTreeMap<usize, Vec<GrayImage>>,
    planted_seeds: RefCell<HashSet<u64>>,
}

impl ImageGenerator for PlantedGenerator {
    fn kind(&self) -> GeneratorKind {
        GeneratorKind::Ldm
    }

    fn generate(&self, conditions: &[ClassCondition], seeds: &[u64]) -> Result<Vec<GrayImage>> {
        Ok(conditions
            .iter()
            .zip(seeds)
            .map(|(c, &seed)| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                if rng.random_bool(0.3) {
                    self.planted_seeds.borrow_mut().insert(seed);
                    let pool = &self.real_by_class[&c.index()];
                    pool[rng.random_range(0..pool.len())].clone()
                } else {
                    let sig = Signature::random(self.spec.image_size, &mut rng);
                    render_image(&self.spec, &sig, &[c.index()], &mut rng)
                }
            })
            .collect())
    }
}

fn criterion_5_privacy_filter_excludes_planted_duplicates() {
    let t = Instant::now();
    let spec = ToySpec {
        num_patients: 60,
        seed: 5,
        ..ToySpec::default()
    };
    let samples = render_corpus(&spec).unwrap();
    let (train, val): (Vec<ToySample>, Vec<ToySample>) = samples
        .into_iter()
        .partition(|s| s.patient_id.parse::<usize>().unwrap() % 10 < 8);
    let trained = train_matcher(&patient_items(&train), &patient_items(&val), &MatcherConfig::default(), 5).unwrap();
    let matcher = &trained.matcher;

    let ids: Vec<String> = train.iter().map(|s| s.image_id.clone()).collect();
    let images: Vec<&GrayImage> = train.iter().map(|s| &s.image).collect();
    let index = index_images(matcher, &ids, &images).unwrap();
    let reference: HashMap<String, GrayImage> = train.iter().map(|s| (s.image_id.clone(), s.image.clone())).collect();
    let oracle = MatcherOracle::new(matcher, &index, reference).unwrap();

    let mut real_by_class: BTreeMap<usize, Vec<GrayImage>> = BTreeMap::new();
    for s in &train {
        real_by_class.entry(s.labels[0]).or_default().push(s.image.clone());
    }
    let generator = PlantedGenerator {
        spec: ToySpec {
            seed: 99,
            ..spec.clone()
        },
        real_by_class,
        planted_seeds: RefCell::new(HashSet::new()),
    };
    let effusion = class_index("Effusion").unwrap();
    let mass = class_index("Mass").unwrap();
    let plan = SamplingPlan {
        per_class_targets: BTreeMap::from([(effusion, 60), (mass, 50)]),
        validation_targets: BTreeMap::from([(effusion, 6), (mass, 5)]),
        threshold: 0.5,
        max_attempts_factor: 10.0,
        seed: 5,
    };
    let out = sample_anonymous_dataset(&plan, &generator, &oracle, 32).unwrap();
    let planted = generator.planted_seeds.borrow();
    let planted_attempts: Vec<_> = out.audit.entries.iter().filter(|e| planted.contains(&e.seed)).collect();
    let planted_kept = planted_attempts.iter().filter(|e| e.decision != "excluded").count();
    let kept_planted_records = out.records.iter().filter(|r| planted.contains(&r.seed)).count();
    let histogram = record_histogram(&out.records);
    let secs = t.elapsed().as_secs_f64();
    verdict(
        5,
        "privacy filter correctness",
        !planted_attempts.is_empty()
            && planted_kept == 0
            && kept_planted_records == 0
            && histogram == plan.per_class_targets
            && secs < 600.0,
        &format!(
            "{} planted duplicates, {planted_kept} kept; histogram {histogram:?} vs targets {:?}; \
             {} attempts, {secs:.1}s",
            planted_attempts.len(),
            plan.per_class_targets,
            out.audit.entries.len()
        ),
    );
}

/// Held-out matcher metrics on a 70/30 patient split of a 200-image corpus.
fn matcher_metrics(strength: f32) -> privsynth::matcher::MatcherMetrics {
    let spec = ToySpec {
        identity_signature_strength: strength,
        seed: 3,
        ..ToySpec::default()
    };
    let samples = render_corpus(&spec).unwrap();
    let (train, val): (Vec<ToySample>, Vec<ToySample>) = samples
        .into_iter()
        .partition(|s| s.patient_id.parse::<usize>().unwrap() % 10 < 7);
    let trained = train_matcher(&patient_items(&train), &[], &MatcherConfig::default(), 1).unwrap();
    evaluate_matcher(&trained.matcher, &patient_items(&val), 6).unwrap()
}

fn criterion_6_matcher_quality_on_planted_identities() {
    let t = Instant::now();
    let strong = matcher_metrics(0.8);
    let none = matcher_metrics(0.0);
    let secs = t.elapsed().as_secs_f64();
    verdict(
        6,
        "matcher quality",
        strong.top1_precision > 0.9
            && strong.verification_auc > 0.9
            && (none.verification_auc - 0.5).abs() <= 0.1
            && secs < 900.0,
        &format!(
            "strength 0.8: top-1 {:.3}, AUC {:.3}; strength 0: AUC {:.3}; {secs:.1}s",
            strong.top1_precision, strong.verification_auc, none.verification_auc
        ),
    );
}

fn run_toy_pipeline(cfg: &ExperimentConfig, root: &Path) -> RunOutcome {
    run_pipeline(cfg, root).unwrap()
}

fn criterion_7_toy_end_to_end_comparison() {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig {
        run_id: "table".into(),
        num_classifier_runs: 3,
        ..ExperimentConfig::default()
    };
    let toy = cfg.data.toy.as_mut().unwrap();
    toy.num_patients = 250; // 1000 images, 2 classes
    toy.seed = 7;
    let out = run_toy_pipeline(&cfg, dir.path());
    let report = |tag: &str| out.manifest.reports.iter().find(|r| r.training_set_tag == tag).unwrap();
    let (real, ldm, gan) = (report("real"), report("syn_ldm"), report("syn_pggan"));
    let text = fs::read_to_string(out.run_dir.join("report/report.txt")).unwrap();
    println!("{text}");
    let header = text.lines().next().unwrap_or_default();
    let columns_ok = ["real", "syn_ldm", "syn_pggan"].iter().all(|c| header.contains(c))
        && text.contains("Mean")
        && [real, ldm, gan].iter().all(|r| r.num_runs == 3);
    let secs = t.elapsed().as_secs_f64();
    println!(
        "recorded, not asserted: syn_ldm {:.1} vs syn_pggan {:.1} ({})",
        ldm.mean_auc.0,
        gan.mean_auc.0,
        if ldm.mean_auc.0 >= gan.mean_auc.0 { "ldm >= pggan" } else { "pggan > ldm" }
    );
    verdict(
        7,
        "toy end-to-end comparison",
        real.mean_auc.0 >= 90.0 && ldm.mean_auc.0 >= 80.0 && real.mean_auc.0 >= ldm.mean_auc.0 && columns_ok && secs < 7200.0,
        &format!(
            "mean AUC real {:.1} ± {:.1}, syn_ldm {:.1} ± {:.1}, syn_pggan {:.1} ± {:.1}; 3 columns: {columns_ok}; {secs:.0}s",
            real.mean_auc.0, real.mean_auc.1, ldm.mean_auc.0, ldm.mean_auc.1, gan.mean_auc.0, gan.mean_auc.1
        ),
    );
}

fn criterion_8_classifier_protocol_conformance() {
    let t = Instant::now();
    let mut problems = Vec::new();

    // BCE on two samples, by hand
    let probs = vec![vec![0.9, 0.2, 0.6], vec![0.3, 0.7, 0.1]];
    let targets = vec![vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]];
    let by_hand = -(0.9f64.ln() + 0.8f64.ln() + 0.6f64.ln() + 0.7f64.ln() + 0.7f64.ln() + 0.9f64.ln()) / 6.0;
    let bce = binary_cross_entropy(&probs, &targets).unwrap();
    if (bce - by_hand).abs() > 1e-9 {
        problems.push(format!("BCE {bce} vs {by_hand}"));
    }

    // two non-improving epochs: 0.01 -> 0.001 -> 0.0001, stop at the third
    let mut s = PlateauSchedule::new(0.01, 10.0, 3);
    let mut trace = vec![s.lr];
    let mut actions = Vec::new();
    for loss in [0.5, 0.6, 0.55, 0.7] {
        actions.push(s.step(loss));
        trace.push(s.lr);
    }
    if actions != [PlateauAction::Improved, PlateauAction::Decayed, PlateauAction::Decayed, PlateauAction::Stop]
        || trace[..3] != [0.01, 0.01, 0.001]
        || (trace[3] - 0.0001).abs() > 1e-18
    {
        problems.push(format!("schedule trace {trace:?} actions {actions:?}"));
    }

    // a short real training run obeys the same rule epoch by epoch
    let spec = ToySpec {
        num_patients: 40,
        seed: 8,
        ..ToySpec::default()
    };
    let samples = render_corpus(&spec).unwrap();
    let labeled: Vec<LabeledImage> = samples
        .iter()
        .map(|s| LabeledImage {
            image: s.image.clone(),
            labels: s.labels.iter().copied().collect(),
        })
        .collect();
    let (train, val) = labeled.split_at(120);
    let cfg = ClassifierConfig {
        max_epochs: 12,
        lr_initial: 0.05,
        ..ClassifierConfig::toy()
    };
    let trained = train_classifier(train, val, &cfg, 8).unwrap();
    let log = &trained.log;
    let mut best = f64::INFINITY;
    let mut bad = 0;
    let mut lr = cfg.lr_initial;
    let mut stopped_at = None;
    for (i, e) in log.iter().enumerate() {
        if e.learning_rate != lr {
            problems.push(format!("epoch {i} lr {} expected {lr}", e.learning_rate));
        }
        if e.val_loss < best {
            best = e.val_loss;
            bad = 0;
        } else {
            bad += 1;
            if bad == 3 {
                stopped_at = Some(i);
                break;
            }
            lr /= 10.0;
        }
    }
    match stopped_at {
        Some(i) if i + 1 != log.len() => problems.push(format!("training continued past the stop at epoch {i}")),
        None if log.len() != cfg.max_epochs => problems.push("training stopped without 3 bad epochs".into()),
        _ => {}
    }
    if log.iter().any(|e| trained.best_val_loss > e.val_loss) {
        problems.push("returned state is not the best validation epoch".into());
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        8,
        "classifier protocol conformance",
        problems.is_empty(),
        &format!(
            "BCE {bce:.12} vs {by_hand:.12}; lr trace {trace:?}; training ran {} epochs (early stop: {}); {secs:.1}s; \
             problems {problems:?}",
            log.len(),
            stopped_at.is_some()
        ),
    );
}

fn small_pipeline_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        run_id: "repro".into(),
        base_seed: 42,
        num_classifier_runs: 2,
        ..ExperimentConfig::default()
    };
    let toy = cfg.data.toy.as_mut().unwrap();
    toy.num_patients = 40;
    cfg.training.vae_epochs = 3;
    cfg.training.diffusion_max_epochs = 3;
    cfg.diffusion.num_steps = 20;
    cfg.gan.growth.epochs_per_stage = 1;
    cfg.matcher.epochs = 4;
    cfg.classifier.max_epochs = 3;
    cfg
}

/// Every CSV under the run directory, by relative path.
fn csv_files(run_dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![run_dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "csv") {
                let rel = p.strip_prefix(run_dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_9_reproducibility() {
    let t = Instant::now();
    let cfg = small_pipeline_config();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let run_a = run_toy_pipeline(&cfg, a.path());
    let run_b = run_toy_pipeline(&cfg, b.path());
    let (csv_a, csv_b) = (csv_files(&run_a.run_dir), csv_files(&run_b.run_dir));
    let catalogs = csv_a.keys().filter(|k| !k.ends_with("audit.csv") && !k.starts_with("report")).count();
    let audits = csv_a.keys().filter(|k| k.ends_with("audit.csv")).count();
    let files_equal = csv_a == csv_b;
    let reports_equal = run_a.manifest.reports == run_b.manifest.reports;
    let text_equal = fs::read(run_a.run_dir.join("report/report.txt")).unwrap()
        == fs::read(run_b.run_dir.join("report/report.txt")).unwrap();
    let manifests_equal = run_a.manifest == run_b.manifest;

    // a rerun over the finished directory reuses every stage
    let rerun = run_toy_pipeline(&cfg, a.path());
    let all_cached = rerun.executed.is_empty() && rerun.manifest.reports == run_a.manifest.reports;
    let secs = t.elapsed().as_secs_f64();
    verdict(
        9,
        "reproducibility",
        files_equal && catalogs >= 6 && audits == 2 && reports_equal && text_equal && manifests_equal && all_cached,
        &format!(
            "{catalogs} catalogs and {audits} audit logs byte-identical: {files_equal}; report numbers identical: \
             {reports_equal}; manifests identical: {manifests_equal}; rerun fully cached: {all_cached}; {secs:.0}s"
        ),
    );
}

fn main() -> ExitCode {
    let criteria: [(&str, fn()); 9] = [
        ("criterion_1_auc_matches_pairwise_oracle", criterion_1_auc_matches_pairwise_oracle),
        ("criterion_2_curation_and_split_properties", criterion_2_curation_and_split_properties),
        ("criterion_3_diffusion_identities", criterion_3_diffusion_identities),
        ("criterion_4_wgan_gp_and_projection_fixtures", criterion_4_wgan_gp_and_projection_fixtures),
        ("criterion_5_privacy_filter_excludes_planted_duplicates", criterion_5_privacy_filter_excludes_planted_duplicates),
        ("criterion_6_matcher_quality_on_planted_identities", criterion_6_matcher_quality_on_planted_identities),
        ("criterion_7_toy_end_to_end_comparison", criterion_7_toy_end_to_end_comparison),
        ("criterion_8_classifier_protocol_conformance", criterion_8_classifier_protocol_conformance),
        ("criterion_9_reproducibility", criterion_9_reproducibility),
    ];
    // `cargo test -- <filter>` selects criteria by substring
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = Vec::new();
    for (name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        if panic::catch_unwind(check).is_err() {
            failed.push(name);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed {failed:?}");
        ExitCode::FAILURE
    }
}
