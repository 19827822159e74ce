use std::time::Instant;

use covaug::augeval::{augment, diversity, make_plan, nearest_centroid_classify, topk_accuracy};
use covaug::datakit::{gen_clusters, gen_spiral, ClassId, ClusterConfig, LabeledFeatureSet, SpiralConfig};
use covaug::episodic::{derive_seed, train, NbsMode, TrainConfig, DOMAIN_AUGMENT};
use covaug::ganstack::Variant;
use covaug::protospace::{compute_prototypes, nbs_hard, nbs_soft, PrototypeTable};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn augment_from_shots(
    bundle: &covaug::ganstack::ModelBundle,
    base: &LabeledFeatureSet,
    shots: &LabeledFeatureSet,
    nbs: NbsMode,
    seed: u64,
    index: u64,
) -> (LabeledFeatureSet, LabeledFeatureSet) {
    let protos = compute_prototypes(shots)
        .unwrap()
        .merge(&compute_prototypes(base).unwrap())
        .unwrap();
    let novel = shots.classes();
    let base_classes = base.classes();
    let map = match nbs {
        NbsMode::Soft => nbs_soft(&protos, &novel, &base_classes).unwrap(),
        NbsMode::Hard { k } => nbs_hard(&protos, &novel, &base_classes, k.min(base_classes.len())).unwrap(),
    };
    let plan = make_plan(base, shots, &map).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, DOMAIN_AUGMENT, index));
    let augmented = augment(bundle, &plan, base, shots, &protos, &mut rng).unwrap();
    let idx: Vec<usize> = augmented
        .examples()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.synthetic)
        .map(|(i, _)| i)
        .collect();
    let synthetic = augmented.subset(&idx).unwrap();
    (augmented, synthetic)
}

fn centroid_accuracy_with(protos: &PrototypeTable, candidates: &[ClassId], test: &LabeledFeatureSet) -> f64 {
    let ranked: Vec<Vec<ClassId>> = test
        .examples()
        .iter()
        .map(|e| nearest_centroid_classify(protos, &e.features, candidates).unwrap())
        .collect();
    let truth: Vec<ClassId> = test.examples().iter().map(|e| e.label).collect();
    topk_accuracy(&ranked, &truth, 1).unwrap()
}

fn centroid_accuracy(train_set: &LabeledFeatureSet, test: &LabeledFeatureSet) -> f64 {
    let protos = compute_prototypes(train_set).unwrap();
    centroid_accuracy_with(&protos, &train_set.classes(), test)
}

#[test]
fn pilot_geometry() {
    // How far below the true-centroid ceiling does the 4-seed baseline sit?
    for extent in [0.6, 0.7, 0.75, 0.8, 0.9, 1.0] {
        for noise in [0.03] {
            let mut gaps = Vec::new();
            let mut ceilings = Vec::new();
            for master in 0..20u64 {
                let mut scfg = SpiralConfig::default();
                scfg.seed = master;
                scfg.angular_extent = extent * std::f64::consts::PI;
                scfg.radial_noise = noise;
                let (_base, seeds, heldout) = gen_spiral(&scfg).unwrap();
                let baseline = centroid_accuracy(&seeds, &heldout);
                let ceiling = centroid_accuracy(&heldout, &heldout);
                gaps.push(ceiling - baseline);
                ceilings.push(ceiling);
            }
            let mean_gap = gaps.iter().sum::<f64>() / 20.0;
            let mean_ceiling = ceilings.iter().sum::<f64>() / 20.0;
            let frac_big = gaps.iter().filter(|&&g| g >= 0.12).count();
            let min_gap = gaps.iter().cloned().fold(f64::INFINITY, f64::min);
            println!(
                "extent {:.2}pi noise {:.2}: ceiling {:.3} gap mean {:+.3} min {:+.3} (>=0.12 in {}/20)",
                extent, noise, mean_ceiling, mean_gap, min_gap, frac_big
            );
        }
    }
}

#[test]
fn pilot_spiral_seeds_in_loop() {
    let include_seeds = std::env::var("SEEDS_IN_LOOP").is_ok();
    let kb: usize = std::env::var("KB").ok().and_then(|s| s.parse().ok()).unwrap_or(4);
    let episodes: u64 = std::env::var("EPISODES").ok().and_then(|s| s.parse().ok()).unwrap_or(8000);
    let anneal: u64 = std::env::var("ANNEAL").ok().and_then(|s| s.parse().ok()).unwrap_or(2000);
    let hard: bool = std::env::var("HARD").is_ok();
    let masters: Vec<u64> = std::env::var("MASTERS")
        .map(|s| s.split(',').map(|x| x.parse().unwrap()).collect())
        .unwrap_or_else(|_| vec![0, 1, 2]);
    let train_seeds: Vec<u64> = std::env::var("TRAIN_SEEDS")
        .map(|s| s.split(',').map(|x| x.parse().unwrap()).collect())
        .unwrap_or_default();
    let variants: Vec<Variant> = std::env::var("VARIANTS")
        .map(|s| s.split(',').map(|x| x.parse().unwrap()).collect())
        .unwrap_or_else(|_| vec![Variant::CGan, Variant::CCov]);
    for master in masters {
        let mut scfg = SpiralConfig::default();
        scfg.seed = master;
        if let Some(e) = std::env::var("EXTENT").ok().and_then(|s| s.parse::<f64>().ok()) {
            scfg.angular_extent = e * std::f64::consts::PI;
        }
        let (base, seeds, heldout) = gen_spiral(&scfg).unwrap();
        let mut trainset = base.clone();
        if include_seeds {
            trainset.extend_from(&seeds).unwrap();
        }
        let real_div = diversity(&heldout, &heldout.classes()).unwrap().mean;
        let baseline = centroid_accuracy(&seeds, &heldout);
        println!("== master {} real_div {:.4} baseline {:.4}", master, real_div, baseline);
        let seeds_list = if train_seeds.is_empty() { vec![master] } else { train_seeds.clone() };
        for ts in seeds_list {
        for (vi, v) in variants.iter().enumerate() {
            let t = Instant::now();
            let mut cfg = TrainConfig::desk_spiral();
            cfg.variant = *v;
            let stable = Variant::ALL.iter().position(|a| a == v).unwrap() as u64;
            cfg.seed = if std::env::var("DERIVE").is_ok() {
                derive_seed(ts, covaug::episodic::DOMAIN_VARIANT, stable)
            } else {
                ts
            };
            cfg.shots_per_class = kb;
            cfg.episodes = episodes;
            cfg.anneal_every = anneal;
            if hard {
                cfg.nbs = NbsMode::Hard { k: 1 };
            }
            if std::env::var("NONSAT").is_ok() {
                cfg.non_saturating = true;
            }
            if let Some(m) = std::env::var("KYFAN").ok().and_then(|s| s.parse().ok()) {
                cfg.kyfan_m = m;
            }
            if let Some(l) = std::env::var("LCOV").ok().and_then(|s| s.parse().ok()) {
                cfg.lambda_cov = l;
            }
            let tune: u64 = std::env::var("TUNE").ok().and_then(|s| s.parse().ok()).unwrap_or(0);
            let (state, log) = if tune > 0 {
                let tune_lr: f64 = std::env::var("TUNE_LR")
                    .ok()
                    .and_then(|s| s.parse().ok())
                    .unwrap_or(2e-5);
                let mut cfg2 = cfg.clone();
                cfg2.lr0 = tune_lr;
                cfg2.anneal_every = 10_000_000;
                if let Some(l) = std::env::var("LCOV2").ok().and_then(|s| s.parse().ok()) {
                    cfg2.lambda_cov = l;
                }
                if let Some(k) = std::env::var("KB2").ok().and_then(|s| s.parse().ok()) {
                    cfg2.shots_per_class = k;
                }
                if let Some(b) = std::env::var("B2").ok().and_then(|s| s.parse().ok()) {
                    cfg2.batch_size = b;
                }
                if std::env::var("NONSAT2").is_ok() {
                    cfg2.non_saturating = true;
                }
                let mut combined = base.clone();
                combined.extend_from(&seeds).unwrap();
                let mut st = covaug::episodic::init_state(&combined, &cfg).unwrap();
                let mut lg = covaug::episodic::run_episodes(&base, &cfg, &mut st, episodes - tune).unwrap();
                lg.extend(covaug::episodic::run_episodes(&combined, &cfg2, &mut st, tune).unwrap());
                (st, lg)
            } else {
                train(&trainset, &cfg).unwrap()
            };
            let last = log.last().unwrap();
            let trials: u64 =
                std::env::var("TRIALS").ok().and_then(|s| s.parse().ok()).unwrap_or(1);
            let (augmented, synthetic) =
                augment_from_shots(&state.bundle, &base, &seeds, cfg.nbs, master, stable);
            let div = diversity(&synthetic, &synthetic.classes()).unwrap().mean;
            let acc = if trials > 1 {
                let mut sum = 0.0;
                for tr in 0..trials {
                    let (aug_t, _) = augment_from_shots(
                        &state.bundle,
                        &base,
                        &seeds,
                        cfg.nbs,
                        master,
                        stable * 1000 + tr,
                    );
                    sum += centroid_accuracy(&aug_t, &heldout);
                }
                sum / trials as f64
            } else {
                centroid_accuracy(&augmented, &heldout)
            };
            // How far each candidate prototype sits from the arm's true mean.
            let true_protos = compute_prototypes(&heldout).unwrap();
            let seed_protos = compute_prototypes(&seeds).unwrap();
            let aug_protos = compute_prototypes(&augmented).unwrap();
            if std::env::var("DUMP").is_ok() {
                use std::io::Write as _;
                let path = format!("/tmp/dump_m{}_{}.csv", master, v);
                let mut f = std::fs::File::create(&path).unwrap();
                writeln!(f, "kind,label,x,y").unwrap();
                for (kind, set) in
                    [("base", &base), ("seed", &seeds), ("held", &heldout), ("syn", &synthetic)]
                {
                    for e in set.examples() {
                        writeln!(
                            f,
                            "{},{},{:.6},{:.6}",
                            kind, e.label.0, e.features[0], e.features[1]
                        )
                        .unwrap();
                    }
                }
            }
            let mut d_seed = 0.0;
            let mut d_aug = 0.0;
            for c in heldout.classes() {
                d_seed += covaug::linalg::distance(seed_protos.get(c).unwrap(), true_protos.get(c).unwrap());
                d_aug += covaug::linalg::distance(aug_protos.get(c).unwrap(), true_protos.get(c).unwrap());
            }
            println!(
                "{} div {:.4} ({:.2}x real) acc {:.4} ({:+.3}) proto_err seed {:.3} aug {:.3} adv_n {:.3} cov {:.3} [{:.1}s]",
                v,
                div,
                div / real_div,
                acc,
                acc - baseline,
                d_seed / 2.0,
                d_aug / 2.0,
                last.report.adv_n,
                last.report.cov,
                t.elapsed().as_secs_f64()
            );
        }
        }
    }
}

#[test]
fn pilot_clusters() {
    use covaug::augeval::{evaluate, Classifier, EvalOptions, EvalSetting};
    let masters: Vec<u64> = std::env::var("MASTERS")
        .map(|s| s.split(',').map(|x| x.parse().unwrap()).collect())
        .unwrap_or_else(|_| vec![0, 1, 2, 3, 4]);
    let trials: usize = std::env::var("TRIALS").ok().and_then(|s| s.parse().ok()).unwrap_or(5);
    let epochs: usize = std::env::var("EPOCHS").ok().and_then(|s| s.parse().ok()).unwrap_or(300);
    let variants = [Variant::CGan, Variant::CCyc, Variant::CDeli, Variant::CCov];
    let mut sums = [0.0f64; 4];
    let mut base_sum = 0.0f64;
    for &master in &masters {
        let mut ccfg = ClusterConfig::default();
        ccfg.seed = master;
        if let Some(s) = std::env::var("CSCALE").ok().and_then(|s| s.parse().ok()) {
            ccfg.covariance_scale = s;
        }
        let (base, seeds, heldout, _bh) = gen_clusters(&ccfg).unwrap();
        let mut pool = seeds.clone();
        pool.extend_from(&heldout).unwrap();
        let real_div = diversity(&heldout, &heldout.classes()).unwrap().mean;
        let mut opts = EvalOptions {
            setting: EvalSetting::Lsl,
            shots: 1,
            trials,
            top_k: 1,
            classifier: Classifier::Linear { epochs, lr: 0.05 },
            augment: false,
            nbs: NbsMode::Soft,
            seed: master,
        };
        let mut baseline = f64::NAN;
        println!("== master {} real_div {:.4}", master, real_div);
        for (vi, v) in variants.iter().enumerate() {
            let t = Instant::now();
            let mut cfg = TrainConfig::desk_clusters();
            cfg.variant = *v;
            let stable = Variant::ALL.iter().position(|a| a == v).unwrap() as u64;
            cfg.seed = derive_seed(master, covaug::episodic::DOMAIN_VARIANT, stable);
            if let Some(e) = std::env::var("EPISODES").ok().and_then(|s| s.parse().ok()) {
                cfg.episodes = e;
            }
            if let Some(a) = std::env::var("ANNEAL").ok().and_then(|s| s.parse().ok()) {
                cfg.anneal_every = a;
            }
            if let Some(k) = std::env::var("KB").ok().and_then(|s| s.parse().ok()) {
                cfg.shots_per_class = k;
            }
            if let Some(l) = std::env::var("LCOV").ok().and_then(|s| s.parse().ok()) {
                cfg.lambda_cov = l;
            }
            if let Some(n) = std::env::var("NB").ok().and_then(|s| s.parse().ok()) {
                cfg.meta_novel_classes = n;
            }
            let (state, _log) = train(&base, &cfg).unwrap();
            if baseline.is_nan() {
                let rep = evaluate(&state.bundle, &base, &pool, None, &opts).unwrap();
                baseline = rep.mean_accuracy;
                base_sum += baseline;
                println!("baseline {:.4}", baseline);
            }
            opts.augment = true;
            opts.nbs = cfg.nbs;
            let rep = evaluate(&state.bundle, &base, &pool, None, &opts).unwrap();
            opts.augment = false;
            if std::env::var("DIAG").is_ok() {
                // One fixed-draw augmentation: compare cloud centers and
                // per-dimension spread against the class's real statistics.
                let (aug, syn) =
                    augment_from_shots(&state.bundle, &base, &seeds, cfg.nbs, master, stable);
                let _ = aug;
                let tp = compute_prototypes(&heldout).unwrap();
                let sp = compute_prototypes(&seeds).unwrap();
                let cp = compute_prototypes(&syn).unwrap();
                for &c in &syn.classes() {
                    let d = pool.dim();
                    let var_of = |set: &LabeledFeatureSet, c: ClassId| -> Vec<f64> {
                        let idx = set.indices_of(c);
                        let mut mean = vec![0.0; d];
                        for &i in &idx {
                            for (k, f) in set.examples()[i].features.iter().enumerate() {
                                mean[k] += f / idx.len() as f64;
                            }
                        }
                        let mut var = vec![0.0; d];
                        for &i in &idx {
                            for (k, f) in set.examples()[i].features.iter().enumerate() {
                                var[k] += (f - mean[k]).powi(2) / idx.len() as f64;
                            }
                        }
                        var
                    };
                    let vr = var_of(&heldout, c);
                    let vs = var_of(&syn, c);
                    let mut hi = Vec::new();
                    let mut lo = Vec::new();
                    let mut order: Vec<usize> = (0..d).collect();
                    order.sort_by(|&a, &b| vr[b].partial_cmp(&vr[a]).unwrap());
                    for (rank, &k) in order.iter().enumerate() {
                        let ratio = (vs[k] / vr[k]).sqrt();
                        if rank < 4 {
                            hi.push(ratio);
                        } else if rank >= d - 4 {
                            lo.push(ratio);
                        }
                    }
                    println!(
                        "  class {} seed_err {:.2} cloud_err {:.2} cloud_to_seed {:.2} sigma_ratio hi4 {:.2} lo4 {:.2}",
                        c,
                        covaug::linalg::distance(sp.get(c).unwrap(), tp.get(c).unwrap()),
                        covaug::linalg::distance(cp.get(c).unwrap(), tp.get(c).unwrap()),
                        covaug::linalg::distance(cp.get(c).unwrap(), sp.get(c).unwrap()),
                        hi.iter().sum::<f64>() / hi.len() as f64,
                        lo.iter().sum::<f64>() / lo.len() as f64,
                    );
                }
            }
            let acc = rep.mean_accuracy;
            sums[vi] += acc;
            println!(
                "{} acc {:.4} ({:+.3}) div {:.4} [{:.1}s]",
                v,
                acc,
                acc - baseline,
                rep.mean_diversity.unwrap_or(f64::NAN),
                t.elapsed().as_secs_f64()
            );
        }
    }
    let n = masters.len() as f64;
    println!(
        "MEANS baseline {:.4} cgan {:.4} ccyc {:.4} cdeli {:.4} ccov {:.4}",
        base_sum / n,
        sums[0] / n,
        sums[1] / n,
        sums[2] / n,
        sums[3] / n
    );
}

#[test]
fn pilot_clusters_skyline() {
    use covaug::augeval::linear_classify_train;
    let masters: Vec<u64> = std::env::var("MASTERS")
        .map(|s| s.split(',').map(|x| x.parse().unwrap()).collect())
        .unwrap_or_else(|_| vec![0, 1]);
    let epochs: usize = std::env::var("EPOCHS").ok().and_then(|s| s.parse().ok()).unwrap_or(300);
    let fill: usize = std::env::var("FILL").ok().and_then(|s| s.parse().ok()).unwrap_or(100);
    for &master in &masters {
        let mut ccfg = ClusterConfig::default();
        ccfg.seed = master;
        if let Some(s) = std::env::var("CSCALE").ok().and_then(|s| s.parse().ok()) {
            ccfg.covariance_scale = s;
        }
        let (_base, seeds, heldout, _bh) = gen_clusters(&ccfg).unwrap();
        let mut pool = seeds.clone();
        pool.extend_from(&heldout).unwrap();
        let classes = pool.classes();
        let mut rng = ChaCha8Rng::seed_from_u64(master);
        let mut bsum = 0.0;
        let mut ssum = 0.0;
        let trials = 5;
        for _tr in 0..trials {
            let mut shots = LabeledFeatureSet::new(pool.dim());
            let mut cloud = LabeledFeatureSet::new(pool.dim());
            let mut test = LabeledFeatureSet::new(pool.dim());
            for &c in &classes {
                let idx = pool.indices_of(c);
                let mut order: Vec<usize> = idx.clone();
                for i in (1..order.len()).rev() {
                    let j = rand::Rng::gen_range(&mut rng, 0..=i);
                    order.swap(i, j);
                }
                // Seed-centered mode translates the cloud so its centroid
                // sits on the shot, isolating what shape alone contributes.
                let shift = std::env::var("SHIFT").is_ok();
                let mu: Vec<f64> = {
                    let mut m = vec![0.0; pool.dim()];
                    for &pi in &order {
                        for (i, f) in pool.examples()[pi].features.iter().enumerate() {
                            m[i] += f / order.len() as f64;
                        }
                    }
                    m
                };
                let seed_feat = pool.examples()[order[0]].features.clone();
                for (rank, &pi) in order.iter().enumerate() {
                    let mut e = pool.examples()[pi].clone();
                    if rank == 0 {
                        shots.push(e).unwrap();
                    } else if rank <= fill {
                        e.synthetic = true;
                        if shift {
                            for i in 0..e.features.len() {
                                e.features[i] += seed_feat[i] - mu[i];
                            }
                        }
                        cloud.push(e).unwrap();
                    } else {
                        test.push(e).unwrap();
                    }
                }
            }
            let mb = linear_classify_train(&shots, epochs, 0.05).unwrap();
            let mut full = shots.clone();
            full.extend_from(&cloud).unwrap();
            let ms = linear_classify_train(&full, epochs, 0.05).unwrap();
            for (model, sum) in [(&mb, &mut bsum), (&ms, &mut ssum)] {
                let ranked: Vec<Vec<ClassId>> =
                    test.examples().iter().map(|e| model.rank(&e.features).unwrap()).collect();
                let truth: Vec<ClassId> = test.examples().iter().map(|e| e.label).collect();
                *sum += topk_accuracy(&ranked, &truth, 1).unwrap() / trials as f64;
            }
        }
        println!("master {} baseline {:.4} skyline {:.4} ({:+.3})", master, bsum, ssum, ssum - bsum);
    }
}
