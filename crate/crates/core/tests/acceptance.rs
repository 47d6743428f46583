//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

use hastcw::analysis::{
    activation_tree, concept_pair_projection, projection_csv, records_csv, top_k_activations,
};
use hastcw::data::{
    Dataset, DatasetSpec, SplitTag, StoredTensor, TensorData, DEFAULT_CONCEPT_PER_CLASS,
};
use hastcw::hcw::{channel_covariance, hcw_forward, Mode, RotationMatrix, WhiteningState};
use hastcw::linalg::Matrix;
use hastcw::net::Architecture;
use hastcw::qopt::{
    alignment_gradient, alignment_objective, cayley_step, AlignmentGradient, ConceptBatchSet,
    Hierarchy,
};
use hastcw::rng::SeededRng;
use hastcw::sc_loss::{sc_loss, ScLossConfig};
use hastcw::trainer::{
    evaluate, loss_and_grads, train, train_to_dir, HcwModel, TrainConfig, TrainMode, TrainReport,
};
use hastcw::tree::{ConceptId, ConceptTree};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_rotation(d: usize, rng: &mut SeededRng) -> RotationMatrix {
    let g = Matrix::new(d, d, (0..d * d).map(|_| rng.normal()).collect()).unwrap();
    cayley_step(&RotationMatrix::identity(d), &AlignmentGradient { g }, 1.0).unwrap()
}

fn random_features(shape: [usize; 4], rng: &mut SeededRng) -> hastcw::tensor::Tensor {
    let [n, d, h, w] = shape;
    // Correlated channels: mix independent normals with a random matrix.
    let mix = Matrix::new(d, d, (0..d * d).map(|_| rng.normal()).collect()).unwrap();
    let mut data = vec![0.0; n * d * h * w];
    let hw = h * w;
    for i in 0..n {
        for p in 0..hw {
            let raw: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let mixed = mix.mul_vec(&raw);
            for c in 0..d {
                data[(i * d + c) * hw + p] = mixed[c] + 0.3 * c as f64;
            }
        }
    }
    hastcw::tensor::Tensor::from_vec(&[n, d, h, w], data).unwrap()
}

fn max_residual(report: &TrainReport) -> f64 {
    report
        .q_updates
        .iter()
        .map(|u| u.orthogonality_residual)
        .fold(0.0, f64::max)
}

fn orthogonality(runs: &[&TrainReport]) -> Outcome {
    let start = Instant::now();
    let mut rng = SeededRng::new(101);
    let mut worst: f64 = 0.0;
    let mut calls = 0;
    for &d in &[8usize, 16, 32] {
        for k in 0..334 {
            let q = random_rotation(d, &mut rng);
            let scale = [1e-2, 1.0, 10.0][k % 3];
            let g = Matrix::new(d, d, (0..d * d).map(|_| scale * rng.normal()).collect()).unwrap();
            let eta = rng.uniform(0.01, 2.0);
            let next = cayley_step(&q, &AlignmentGradient { g }, eta).unwrap();
            worst = worst.max(next.residual());
            calls += 1;
        }
    }
    let elapsed = start.elapsed();
    let train_worst = runs.iter().map(|r| max_residual(r)).fold(0.0, f64::max);
    let updates: usize = runs.iter().map(|r| r.q_updates.len()).sum();
    let pass = calls >= 1000
        && worst <= 1e-8
        && train_worst <= 1e-8
        && updates > 0
        && elapsed < Duration::from_secs(10);
    outcome(
        pass,
        format!(
            "{calls} random steps max residual {worst:.2e}; {updates} training updates max residual {train_worst:.2e}; {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn whitening() -> Outcome {
    let start = Instant::now();
    let mut rng = SeededRng::new(202);
    let mut worst: f64 = 0.0;
    let shapes = [[6, 4, 3, 3], [4, 8, 4, 4], [2, 16, 6, 6], [3, 32, 8, 8]];
    for (b, shape) in shapes.iter().cycle().take(20).enumerate() {
        let z = random_features(*shape, &mut rng);
        let d = shape[1];
        let state = WhiteningState::new(d, 0.9, 0.0).unwrap();
        let rotations = if b == 0 { 100 } else { 5 };
        for r in 0..rotations {
            let q = if r == 0 {
                RotationMatrix::identity(d)
            } else {
                random_rotation(d, &mut rng)
            };
            let (out, _) = hcw_forward(&z, &state, &q, Mode::Train).unwrap();
            let cov = channel_covariance(&out).unwrap();
            worst = worst.max(cov.sub(&Matrix::identity(d)).unwrap().max_abs());
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-6 && elapsed < Duration::from_secs(10),
        format!(
            "max |cov - I| {worst:.2e} over 20 batches and 195 rotations; {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn gradients() -> Outcome {
    let start = Instant::now();
    // (a) classifier plus semantic loss through the train-mode whitening.
    let spec = DatasetSpec {
        per_leaf: 10,
        image_size: 16,
        ..DatasetSpec::default_with_seed(5)
    };
    let ds = Dataset::synthesize(&spec, 2).unwrap();
    let arch = Architecture::new(3, 16, 16, 9);
    let model =
        HcwModel::init(arch, ds.tree.clone(), 0.9, 1e-3, 2, &mut SeededRng::new(6)).unwrap();
    let idx: Vec<usize> = (0..14).map(|i| i * 6 + 1).collect();
    let images = ds.images.gather(&idx);
    let classes = ds.class_indices().unwrap();
    let cls: Vec<usize> = idx.iter().map(|&i| classes[i]).collect();
    let labels: Vec<ConceptId> = idx.iter().map(|&i| ds.labels[i]).collect();
    let sc = ScLossConfig::default();
    let base = loss_and_grads(&model, &images, &cls, &labels, Some(&sc), Mode::Train).unwrap();
    let mut rng = SeededRng::new(7);
    let mut worst_a: f64 = 0.0;
    let h = 1e-6;
    // Denominator floor at the scale of the whole gradient: the last conv
    // bias has an exactly zero gradient (the batch mean absorbs it).
    let scale = base
        .grads
        .grads
        .iter()
        .map(|g| g.max_abs())
        .fold(0.0, f64::max);
    for p in 0..model.params.len() {
        let n = model.params.entries[p].value.numel();
        for _ in 0..6 {
            let j = rng.below(n);
            let mut plus = model.clone();
            plus.params.entries[p].value.data_mut()[j] += h;
            let mut minus = model.clone();
            minus.params.entries[p].value.data_mut()[j] -= h;
            let fp = loss_and_grads(&plus, &images, &cls, &labels, Some(&sc), Mode::Train)
                .unwrap()
                .loss;
            let fm = loss_and_grads(&minus, &images, &cls, &labels, Some(&sc), Mode::Train)
                .unwrap()
                .loss;
            let fd = (fp - fm) / (2.0 * h);
            worst_a = worst_a.max(rel_err(base.grads.grads[p].data()[j], fd, 1e-3 * scale));
        }
    }

    // (b) semantic loss with respect to its inputs.
    let tree = ConceptTree::default_tree();
    let leaves = tree.leaves();
    let mut worst_b: f64 = 0.0;
    for trial in 0..5 {
        let n = 12;
        let lab: Vec<ConceptId> = (0..n)
            .map(|i| leaves[(i * 5 + trial) % leaves.len()])
            .collect();
        let vecs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..6).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect();
        let cfg = ScLossConfig::default();
        let out = sc_loss(&vecs, &lab, &tree, &cfg).unwrap();
        for i in 0..n {
            for k in 0..6 {
                let mut p = vecs.clone();
                let mut m = vecs.clone();
                p[i][k] += 1e-6;
                m[i][k] -= 1e-6;
                let fd = (sc_loss(&p, &lab, &tree, &cfg).unwrap().total
                    - sc_loss(&m, &lab, &tree, &cfg).unwrap().total)
                    / 2e-6;
                worst_b = worst_b.max(rel_err(out.grads[i][k], fd, 1e-6));
            }
        }
    }

    // (c) alignment objective: directional slopes against <-G, dQ>.
    let mut worst_c: f64 = 0.0;
    for trial in 0..10 {
        let d = 20;
        let batches: Vec<Vec<Vec<f64>>> = tree
            .ids()
            .map(|_| {
                (0..3 + trial % 3)
                    .map(|_| (0..d).map(|_| rng.normal()).collect())
                    .collect()
            })
            .collect();
        let set = ConceptBatchSet::new(d, batches).unwrap();
        let q = random_rotation(d, &mut rng);
        let hierarchy = if trial % 2 == 0 {
            Hierarchy::Tree
        } else {
            Hierarchy::Flat
        };
        let g = alignment_gradient(&set, &tree, d, hierarchy).unwrap();
        let dq = Matrix::new(d, d, (0..d * d).map(|_| rng.normal()).collect()).unwrap();
        let slope = -g.g.dot(&dq);
        // The objective is linear in Q, so the raw matrix (not re-orthogonalized) is used.
        let at = |t: f64| {
            let m = q.matrix().add(&dq.scale(t)).unwrap();
            objective_unchecked(&m, &set, &tree, hierarchy)
        };
        let fd = (at(1e-4) - at(-1e-4)) / 2e-4;
        worst_c = worst_c.max(rel_err(slope, fd, 1e-6));
        assert!(
            (alignment_objective(&q, &set, &tree, hierarchy).unwrap()
                - objective_unchecked(q.matrix(), &set, &tree, hierarchy))
            .abs()
                < 1e-12
        );
    }
    let elapsed = start.elapsed();
    outcome(
        worst_a <= 1e-4 && worst_b <= 1e-6 && worst_c <= 1e-6 && elapsed < Duration::from_secs(60),
        format!(
            "classifier {worst_a:.2e}, semantic loss {worst_b:.2e}, alignment {worst_c:.2e}; {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

/// Alignment objective written out directly for an arbitrary matrix.
fn objective_unchecked(
    q: &Matrix,
    set: &ConceptBatchSet,
    tree: &ConceptTree,
    hierarchy: Hierarchy,
) -> f64 {
    let d = q.rows();
    let mut total = 0.0;
    for c in tree.ids() {
        let batch = set.batch(c);
        let n = batch.len() as f64;
        let sum: Vec<f64> = (0..d).map(|r| batch.iter().map(|v| v[r]).sum()).collect();
        let dot = |axis: usize| (0..d).map(|r| q[(r, axis)] * sum[r]).sum::<f64>();
        total += dot(tree.axis_of(c)) / n;
        if hierarchy == Hierarchy::Tree && !tree.is_leaf(c) {
            let k = tree.children(c).len() as f64;
            for &child in tree.children(c) {
                total += dot(tree.axis_of(child)) / (n * k);
            }
        }
    }
    total
}

fn monotonicity(report: &TrainReport, elapsed: Duration) -> Outcome {
    let triggers = report.q_updates.len();
    let accepted: Vec<_> = report.q_updates.iter().filter(|u| u.accepted).collect();
    let violations = accepted
        .iter()
        .filter(|u| u.full_objective_after < u.full_objective_before)
        .count();
    let rate = accepted.len() as f64 / triggers.max(1) as f64;
    let min_gain = accepted
        .iter()
        .map(|u| u.full_objective_after - u.full_objective_before)
        .fold(f64::INFINITY, f64::min);
    outcome(
        triggers > 0 && violations == 0 && rate >= 0.8 && elapsed < Duration::from_secs(300),
        format!(
            "{}/{triggers} triggers accepted, {violations} decreases on the concept subset (smallest gain {min_gain:.4}); {:.1}s",
            accepted.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn classification(sc_acc: f64, cw_acc: f64, elapsed: Duration) -> Outcome {
    let gap = (sc_acc - cw_acc).abs() * 100.0;
    outcome(
        sc_acc >= 0.90 && gap <= 3.0 + 1e-9 && elapsed < Duration::from_secs(900),
        format!(
            "hastcw_sc test accuracy {sc_acc:.4}, plain_cw {cw_acc:.4}, gap {gap:.2} points; {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn purity(model: &HcwModel, ds: &Dataset) -> Outcome {
    let mut failures = Vec::new();
    for c in ds.tree.ids() {
        let members = ds.tree.subtree(c);
        let top = top_k_activations(model, ds, ds.tree.name(c), 5).unwrap();
        let hits = top
            .iter()
            .filter(|r| members.contains(&ds.labels[r.sample_index]))
            .count();
        if hits < 4 {
            failures.push(format!("{} {hits}/5", ds.tree.name(c)));
        }
    }
    outcome(
        failures.len() <= 1,
        format!(
            "{} of {} concepts below 4/5 [{}]",
            failures.len(),
            ds.tree.len(),
            failures.join(", ")
        ),
    )
}

fn geometry(model: &HcwModel, ds: &Dataset) -> Outcome {
    let m = evaluate(model, ds, SplitTag::Test).unwrap();
    let pairs = m.brother_pairs + m.cousin_pairs;
    let pass = pairs >= 1000
        && m.mean_brother_distance < m.mean_cousin_distance
        && m.centroid_brother_distance < m.centroid_cousin_distance;
    outcome(
        pass,
        format!(
            "sample pairs {pairs}: brother {:.4} < cousin {:.4}; centroids: brother {:.4} < cousin {:.4}",
            m.mean_brother_distance, m.mean_cousin_distance, m.centroid_brother_distance, m.centroid_cousin_distance
        ),
    )
}

fn hash_dir(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let bytes = std::fs::read(&path).unwrap();
        out.insert(
            path.file_name().unwrap().to_string_lossy().into_owned(),
            hex::encode(Sha256::digest(&bytes)),
        );
    }
    out
}

fn analysis_outputs(model_dir: &Path, ds: &Dataset) -> String {
    let (model, _) = HcwModel::load(model_dir).unwrap();
    let mut text = records_csv(&top_k_activations(&model, ds, "Apple", 10).unwrap());
    text.push_str(&projection_csv(
        &concept_pair_projection(&model, ds, "Fuji", "Gala").unwrap(),
    ));
    text.push_str(&activation_tree(&model, ds, 7).unwrap().to_text(&ds.tree));
    text
}

fn determinism(
    data_dir: &Path,
    work: &Path,
    cfg: &TrainConfig,
) -> (Outcome, TrainReport, Duration) {
    let start = Instant::now();
    let a = work.join("run_a");
    let first = train_to_dir(cfg, data_dir, &a).unwrap();
    let first_elapsed = start.elapsed();
    let b = work.join("run_b");
    train_to_dir(cfg, data_dir, &b).unwrap();
    let (ha, hb) = (hash_dir(&a), hash_dir(&b));
    let ds = Dataset::load(data_dir).unwrap();
    let same_files = ha == hb && ha.len() > 10;
    let same_analysis = analysis_outputs(&a, &ds) == analysis_outputs(&b, &ds);
    (
        outcome(
            same_files && same_analysis,
            format!(
                "{} checkpoint/report files identical: {same_files}; analysis outputs identical: {same_analysis}",
                ha.len()
            ),
        ),
        first,
        first_elapsed,
    )
}

fn round_trip(work: &Path) -> Outcome {
    let mut rng = SeededRng::new(909);
    let mut exact = 0;
    for i in 0..100 {
        let rank = 1 + rng.below(4);
        let dims: Vec<usize> = (0..rank).map(|_| 1 + rng.below(5)).collect();
        let n: usize = dims.iter().product();
        let data = match i % 3 {
            0 => TensorData::F32((0..n).map(|_| rng.normal() as f32 * 1e3).collect()),
            1 => TensorData::U32((0..n).map(|_| rng.next_u64() as u32).collect()),
            _ => TensorData::F64((0..n).map(|_| rng.normal() * 1e-7).collect()),
        };
        let t = StoredTensor::new(dims, data).unwrap();
        let path = work.join(format!("t{i}.hcwt"));
        hastcw::data::write_tensor(&path, &t).unwrap();
        let back = hastcw::data::read_tensor(&path).unwrap();
        if back == t && std::fs::read(&path).unwrap() == hastcw::data::container::encode(&back) {
            exact += 1;
        }
    }

    // Corrupt a checkpoint two ways and ask the CLI to read it.
    let data_dir = work.join("rt_data");
    let model_dir = work.join("rt_model");
    let spec = DatasetSpec {
        per_leaf: 10,
        image_size: 16,
        ..DatasetSpec::default_with_seed(3)
    };
    Dataset::synthesize(&spec, 2)
        .unwrap()
        .save(&data_dir)
        .unwrap();
    let ds = Dataset::load(&data_dir).unwrap();
    let arch = Architecture::new(3, 16, 16, 9);
    let model =
        HcwModel::init(arch, ds.tree.clone(), 0.9, 1e-5, 2, &mut SeededRng::new(1)).unwrap();
    model
        .save(
            &model_dir,
            &TrainConfig {
                latent_dim: 16,
                ..TrainConfig::default()
            },
        )
        .unwrap();
    let target = model_dir.join("head.weight.hcwt");
    let original = std::fs::read(&target).unwrap();
    let exit_with = |bytes: &[u8]| {
        std::fs::write(&target, bytes).unwrap();
        let status = Command::new(env!("CARGO_BIN_EXE_hastcw"))
            .args(["eval", "--model"])
            .arg(&model_dir)
            .arg("--data")
            .arg(&data_dir)
            .args(["--split", "test"])
            .output()
            .unwrap()
            .status;
        status.code()
    };
    let mut bad_magic = original.clone();
    bad_magic[..4].copy_from_slice(b"XXXX");
    let magic_code = exit_with(&bad_magic);
    let mut bad_dims = original.clone();
    // First dimension field follows magic, version, dtype and rank.
    bad_dims[10] ^= 0x01;
    let dims_code = exit_with(&bad_dims);
    let clean_code = exit_with(&original);
    let dims_decode = hastcw::data::container::decode(&bad_dims, &target).is_err();
    outcome(
        exact == 100 && magic_code == Some(4) && dims_code == Some(4) && clean_code == Some(0) && dims_decode,
        format!("{exact}/100 exact; exit codes: bad magic {magic_code:?}, bad dims {dims_code:?}, intact {clean_code:?}"),
    )
}

fn main() -> ExitCode {
    let work = tempfile::tempdir().unwrap();
    let data_dir = work.path().join("data");
    let spec = DatasetSpec::default_with_seed(0);
    let ds = Dataset::synthesize(&spec, DEFAULT_CONCEPT_PER_CLASS).unwrap();
    ds.save(&data_dir).unwrap();
    let ds = Dataset::load(&data_dir).unwrap();

    let short = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let (det, short_report, short_elapsed) = determinism(&data_dir, work.path(), &short);

    let start = Instant::now();
    let sc_run = train(&TrainConfig::default(), &ds).unwrap();
    let cw_run = train(
        &TrainConfig {
            mode: TrainMode::PlainCw,
            ..TrainConfig::default()
        },
        &ds,
    )
    .unwrap();
    let train_elapsed = start.elapsed();

    let results = [
        (
            "orthogonality",
            orthogonality(&[&sc_run.report, &cw_run.report]),
        ),
        ("whitening", whitening()),
        ("gradients", gradients()),
        (
            "alignment monotonicity",
            monotonicity(&short_report, short_elapsed),
        ),
        (
            "scaled classification",
            classification(
                sc_run.report.test_accuracy.unwrap(),
                cw_run.report.test_accuracy.unwrap(),
                train_elapsed,
            ),
        ),
        ("concept purity", purity(&sc_run.model, &ds)),
        ("brother/cousin geometry", geometry(&sc_run.model, &ds)),
        ("determinism", det),
        ("format round-trip", round_trip(work.path())),
    ];
    let mut failed = 0;
    for (i, (name, r)) in results.iter().enumerate() {
        println!(
            "{} [{}] {name}: {}",
            if r.pass { "PASS" } else { "FAIL" },
            i + 1,
            r.detail
        );
        failed += usize::from(!r.pass);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
