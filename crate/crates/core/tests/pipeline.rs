use mvdet::metrics::{evaluate, nds, read_jsonl};
use mvdet::model::{ModeFlags, Model};
use mvdet::pipeline::*;

fn tiny() -> RunConfig {
    let mut cfg = gradcheck_config();
    cfg.model.num_proposals = 16;
    cfg.optim.lr = 2e-3;
    cfg
}

fn samples(cfg: &RunConfig, start: usize, n: usize) -> Vec<mvdet::model::Sample> {
    let probe = Model::new(&cfg.model, cfg.modes, &cfg.sim, 0).unwrap();
    prepare(
        &probe,
        scenes_in_memory(&cfg.sim, cfg.seed, start, n).unwrap(),
    )
    .unwrap()
}

#[test]
fn generate_writes_partitioned_deterministic_files() {
    let cfg = tiny();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let files = generate(&cfg.sim, 10, 3, 5, a.path()).unwrap();
    generate(&cfg.sim, 10, 3, 5, b.path()).unwrap();
    assert_eq!(files.len(), 10);
    for f in &files {
        let rel = f.strip_prefix(a.path()).unwrap();
        assert_eq!(
            std::fs::read(f).unwrap(),
            std::fs::read(b.path().join(rel)).unwrap()
        );
    }
    let train = read(&a.path().join("train.txt")).unwrap();
    let val = read(&a.path().join("val.txt")).unwrap();
    let mut all: Vec<&str> = train.lines().chain(val.lines()).collect();
    assert_eq!((train.lines().count(), val.lines().count()), (7, 3));
    all.sort_unstable();
    all.dedup();
    assert_eq!(all.len(), 10);
    assert_eq!(load_manifest(&a.path().join("val.txt")).unwrap().len(), 3);
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let mut cfg = tiny();
    cfg.optim.epochs = 3;
    let s = samples(&cfg, 0, 20);
    let run = || {
        let t = train(&cfg, &s, |_| Ok(()), |_, _, _| Ok(())).unwrap();
        t.log
    };
    let a = run();
    let b = run();
    assert_eq!(
        serde_json::to_string(&a).unwrap(),
        serde_json::to_string(&b).unwrap()
    );
    assert!(a.len() >= 50);
    assert!(
        a[49].loss.total < a[0].loss.total,
        "{} vs {}",
        a[49].loss.total,
        a[0].loss.total
    );
    assert!(a.iter().all(|l| l.loss.total.is_finite()));
}

#[test]
fn fixed_queries_train_the_proposal_loss_and_the_bank() {
    let mut cfg = tiny();
    cfg.modes = ModeFlags {
        fixed_queries: true,
        ..Default::default()
    };
    cfg.optim.epochs = 1;
    let s = samples(&cfg, 0, 4);
    let init = Model::new(&cfg.model, cfg.modes, &cfg.sim, 0).unwrap();
    let t = train(&cfg, &s, |_| Ok(()), |_, _, _| Ok(())).unwrap();
    assert!(t
        .log
        .iter()
        .all(|l| l.loss.proposal.total > 0.0 && !l.loss.teacher_forced));
    assert_eq!(t.model.counters.teacher_forcing, 0);
    assert_eq!(t.model.counters.target_filtering, 0);
    let bank = |m: &Model| m.store.get("fixed.query").unwrap().data.clone();
    assert_ne!(bank(&init), bank(&t.model));
}

#[test]
fn evaluation_contracts() {
    let cfg = tiny();
    let v = samples(&cfg, 100, 6);
    let gt = ground_truth(&v);
    let perfect = evaluate(&gt, &gt, 3, &cfg.eval).unwrap();
    assert!((perfect.nds - 1.0).abs() < 1e-12);

    let mut model = Model::new(&cfg.model, cfg.modes, &cfg.sim, 11).unwrap();
    let (report, preds) = evaluate_model(&mut model, &v, &cfg.eval).unwrap();
    assert!(report.map < 0.05, "{}", report.map);
    assert_eq!(report.nds, nds(report.map, &report.tp_array()));
    assert_eq!(model.counters.teacher_forcing, 0);
    assert_eq!(model.counters.target_filtering, 0);
    assert_eq!(model.counters.infer_passes, 6);
    assert_eq!(
        read_jsonl(&mvdet::metrics::write_jsonl(&preds).unwrap()).unwrap(),
        preds
    );
}

#[test]
fn checkpoint_round_trip_reproduces_metrics() {
    let mut cfg = tiny();
    cfg.optim.epochs = 1;
    let s = samples(&cfg, 0, 5);
    let v = samples(&cfg, 100, 4);
    let mut t = train(&cfg, &s, |_| Ok(()), |_, _, _| Ok(())).unwrap();
    let (before, _) = evaluate_model(&mut t.model, &v, &cfg.eval).unwrap();
    let text = serde_json::to_string(&t.model.checkpoint(Some(&t.optim))).unwrap();
    let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    let (mut loaded, optim) =
        Model::with_checkpoint(&cfg.model, cfg.modes, &cfg.sim, &doc).unwrap();
    assert_eq!(optim.as_ref(), Some(&t.optim));
    let (after, _) = evaluate_model(&mut loaded, &v, &cfg.eval).unwrap();
    assert_eq!(before, after);

    let mut other = cfg.model.clone();
    other.channels = 16;
    let err = Model::with_checkpoint(&other, cfg.modes, &cfg.sim, &doc)
        .err()
        .unwrap()
        .to_string();
    assert!(err.contains("encoder.l2.w"), "{err}");
}

#[test]
fn bev_is_well_formed_xml() {
    let cfg = tiny();
    let v = samples(&cfg, 0, 1);
    let gt = ground_truth(&v);
    let svg = render_bev(&gt, &gt, 40.0);
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let groups: Vec<_> = doc.descendants().filter(|n| n.has_tag_name("g")).collect();
    let gt_group = groups
        .iter()
        .find(|n| n.attribute("id") == Some("gt"))
        .unwrap();
    assert_eq!(
        gt_group.children().filter(|n| n.is_element()).count(),
        gt.len()
    );
    let empty = render_bev(&[], &[], 40.0);
    let doc = roxmltree::Document::parse(&empty).unwrap();
    assert_eq!(
        doc.descendants().filter(|n| n.has_tag_name("rect")).count(),
        1
    );
    assert_eq!(
        doc.descendants().filter(|n| n.has_tag_name("line")).count(),
        2
    );
}

#[test]
fn ablation_presets_emit_one_row_per_variant() {
    let base = tiny();
    for (preset, rows) in [("consistency", 4), ("proposal_count_sweep", 4)] {
        let vs = preset_variants(&base, preset).unwrap();
        assert_eq!(vs.len(), rows);
    }
    let sweep: Vec<usize> = preset_variants(&base, "proposal_count_sweep")
        .unwrap()
        .iter()
        .map(|v| v.config.model.num_proposals)
        .collect();
    assert_eq!(sweep, vec![25, 50, 100, 200]);
    let mut cfg = base.clone();
    cfg.optim.epochs = 1;
    let tr = scenes_in_memory(&cfg.sim, 0, 0, 2).unwrap();
    let va = scenes_in_memory(&cfg.sim, 0, 50, 2).unwrap();
    let rows = run_ablation(&cfg, "aux_branches", &tr, &va, |_, _| {}).unwrap();
    let csv = ablation_csv(&rows);
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("variant,nds,map"));
}

#[test]
fn non_finite_loss_aborts_with_report() {
    let mut cfg = tiny();
    cfg.optim.epochs = 1;
    let s = samples(&cfg, 0, 2);
    let mut poisoned = s.clone();
    poisoned[0].pooled.data[0] = f64::NAN;
    poisoned[1].pooled.data[0] = f64::NAN;
    match train(&cfg, &poisoned, |_| Ok(()), |_, _, _| Ok(())) {
        Err(TrainError::NonFinite(e)) => {
            assert_eq!(e.step, 0);
            assert!(!(e.log.loss.is_finite() && e.log.grad_norm.is_finite()));
        }
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training accepted a NaN loss"),
    }
}
