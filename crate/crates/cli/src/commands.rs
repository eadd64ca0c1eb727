use std::path::{Path, PathBuf};

use seqloc::assoc::{
    compose_correspondences, indirect_sets, match_file_name, min_cost_path, neighbour_jobs, read_pairs, sample_disjoint_pairs,
    sample_pairs, validate_matches, write_pairs, CorrespondenceSet, ExperienceGraph, SampledPair,
};
use seqloc::config::PipelineConfig;
use seqloc::emtrain::{self, frame_disparity, DescriptorModel, FrameCache, TrainReport};
use seqloc::features::{detect_keypoints, FeatureMap};
use seqloc::imageio::DenseGrid;
use seqloc::pose::{estimate_pose, PoseParams};
use seqloc::placerec::{align, read_raw_matches, write_raw_matches};
use seqloc::simworld::{generate_dataset, load_dataset, read_feature_map, write_feature_map, Dataset, Experience, Frame};
use seqloc::{table, Error, Result};
use serde_json::json;

use crate::log::{info, stage, Failure};
use crate::{Command, Outputs};

pub fn dispatch(cmd: Command, cfg: &PipelineConfig, out: &Outputs) -> Result<(), Failure> {
    match cmd {
        Command::Simulate { dataset } => {
            let path = out.path(&dataset);
            stage("simulate", || simulate(cfg, &path))
        }
        Command::Seqslam {
            dataset,
            query,
            reference,
            out: dst,
            diff_out,
        } => {
            let ds = load(&dataset)?;
            stage("seqslam", || {
                seqslam_pair(
                    cfg,
                    &ds,
                    query,
                    reference,
                    &out.path(&dst),
                    diff_out.map(|m| out.path(&m)).as_deref(),
                )
            })
        }
        Command::Validate {
            dataset,
            query,
            reference,
            raw,
            e_sq,
            out: dst,
        } => {
            let ds = load(&dataset)?;
            let mut cfg = cfg.clone();
            cfg.validation.e_sq = e_sq.unwrap_or(cfg.validation.e_sq);
            stage("validate", || {
                cfg.validation.validate()?;
                let raw = read_raw_matches(&raw)?;
                let cs = validate_pair(&cfg, &ds, query, reference, &raw)?;
                let path = out.path(&dst);
                create_parent(&path)?;
                cs.write_csv(&path)
            })
        }
        Command::Graph { dataset, k, out: dst } => {
            let ds = load(&dataset)?;
            stage("graph", || {
                cfg.seqslam.validate()?;
                cfg.validation.validate()?;
                let g = seqloc::assoc::build_graph(&ds, k.unwrap_or(cfg.graph_k), &cfg.seqslam, &cfg.validation)?;
                save_graph(&g, &out.path(&dst))
            })
        }
        Command::Sample {
            graph,
            src,
            dst,
            n,
            out: pairs_out,
            heldout_n,
            heldout_out,
        } => stage("sample", || {
            let g = ExperienceGraph::load(&graph)?;
            let sets = match (src, dst) {
                (Some(a), Some(b)) => vec![compose_correspondences(&g, &min_cost_path(&g, a, b)?)?],
                _ => indirect_sets(&g)?,
            };
            let pairs = sample_pairs(&sets, n.unwrap_or(cfg.pairs), cfg.seed)?;
            let path = out.path(&pairs_out);
            create_parent(&path)?;
            write_pairs(&path, &pairs)?;
            if let (Some(n), Some(p)) = (heldout_n, heldout_out) {
                let path = out.path(&p);
                create_parent(&path)?;
                write_pairs(&path, &sample_disjoint_pairs(&sets, n, cfg.seed, &pairs)?)?;
            }
            Ok(())
        }),
        Command::Detect {
            map,
            dataset,
            model,
            frame,
            map_out,
            cell,
            out: dst,
        } => {
            let ds = dataset.as_deref().map(load).transpose()?;
            stage("detect", || {
                let map = match (map, ds, model, frame) {
                    (Some(p), ..) => read_map(&p)?,
                    (None, Some(ds), Some(model), Some((e, n))) => {
                        let model = DescriptorModel::load(&model)?;
                        emtrain::forward(&model, frame_by_ref(&ds, (e, n))?)
                    }
                    _ => return Err(Error::InvalidConfig("need --map, or --dataset with --model and --frame".into())),
                };
                if let Some(p) = map_out {
                    let path = out.path(&p);
                    create_parent(&path)?;
                    write_feature_map(&path, &map)?;
                }
                let cell = cell.unwrap_or(cfg.train.pose.cell);
                if cell == 0 {
                    return Err(Error::InvalidConfig("cell must be positive".into()));
                }
                let rows: Vec<(f64, f64, f64)> = detect_keypoints(&map, cell)
                    .iter()
                    .map(|kp| (kp.q[0], kp.q[1], kp.score))
                    .collect();
                let path = out.path(&dst);
                create_parent(&path)?;
                table::write_csv(&path, &rows, &["u", "v", "score"])
            })
        }
        Command::Pose {
            dataset,
            src,
            tgt,
            maps,
            tau,
            ransac_iters,
            inlier_sq,
            out: dst,
        } => {
            let ds = load(&dataset)?;
            let mut params = cfg.train.pose.clone();
            params.tau = tau.unwrap_or(params.tau);
            params.ransac_iters = ransac_iters.unwrap_or(params.ransac_iters);
            params.inlier_sq = inlier_sq.unwrap_or(params.inlier_sq);
            stage("pose", || pose_pair(&params, &dataset, &ds, src, tgt, &maps, &out.path(&dst)))
        }
        Command::Train {
            dataset,
            pairs,
            epochs,
            lr,
            model_out,
            report,
            #[cfg(feature = "ground-truth")]
            heldout,
        } => {
            let ds = load(&dataset)?;
            let mut cfg = cfg.clone();
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            cfg.train.lr = lr.unwrap_or(cfg.train.lr);
            stage("train", || {
                let pairs = read_pairs(&pairs)?;
                #[cfg(feature = "ground-truth")]
                let heldout = heldout.map(|h| read_pairs(&h)).transpose()?;
                #[cfg(not(feature = "ground-truth"))]
                let heldout: Option<Vec<SampledPair>> = None;
                train(&cfg, &dataset, &ds, &pairs, heldout.as_deref(), &out.path(&model_out), &out.path(&report))
            })
        }
        #[cfg(feature = "ground-truth")]
        Command::Eval {
            dataset,
            model,
            pairs,
            out: dst,
            summary,
        } => {
            let ds = load(&dataset)?;
            stage("eval", || {
                let model = DescriptorModel::load(&model)?;
                let pairs = read_pairs(&pairs)?;
                evaluate(
                    cfg,
                    &dataset,
                    &ds,
                    &model,
                    &pairs,
                    &out.path(&dst),
                    summary.map(|s| out.path(&s)).as_deref(),
                )
            })
        }
        Command::Pipeline { simulate, dataset } => pipeline(cfg, out, simulate, dataset),
    }
}

fn load(path: &Path) -> Result<Dataset, Failure> {
    if !path.join("meta.json").is_file() {
        return Err(Failure::missing_dataset(path.to_path_buf()));
    }
    stage("load_dataset", || load_dataset(path))
}

fn simulate(cfg: &PipelineConfig, path: &Path) -> Result<()> {
    cfg.sim.validate()?;
    let sim = generate_dataset(&cfg.sim, cfg.seed, path)?;
    info(
        "dataset",
        json!({
            "path": path,
            "experiences": sim.dataset.experiences.len(),
            "frames": sim.dataset.experiences.iter().map(|e| e.len()).collect::<Vec<_>>(),
        }),
    );
    Ok(())
}

fn experience_by_id(ds: &Dataset, id: u32) -> Result<&Experience> {
    ds.experience(id)
        .ok_or_else(|| Error::InvalidConfig(format!("dataset has no experience {id}")))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    create_parent(path)?;
    std::fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        }),
        None => Ok(()),
    }
}

fn seqslam_pair(
    cfg: &PipelineConfig,
    ds: &Dataset,
    query: u32,
    reference: u32,
    raw_path: &Path,
    matrix_path: Option<&Path>,
) -> Result<()> {
    cfg.seqslam.validate()?;
    let (dm, raw) = align(experience_by_id(ds, query)?, experience_by_id(ds, reference)?, &cfg.seqslam)?;
    create_parent(raw_path)?;
    write_raw_matches(raw_path, &raw)?;
    if let Some(p) = matrix_path {
        write_file(p, &dm.to_csv_bytes())?;
    }
    Ok(())
}

fn validate_pair(
    cfg: &PipelineConfig,
    ds: &Dataset,
    query: u32,
    reference: u32,
    raw: &[seqloc::placerec::RawMatch],
) -> Result<CorrespondenceSet> {
    validate_matches(experience_by_id(ds, query)?, experience_by_id(ds, reference)?, raw, &cfg.validation)
}

fn save_graph(g: &ExperienceGraph, path: &Path) -> Result<()> {
    g.save(path)?;
    info(
        "graph",
        json!({
            "edges": g.edges.iter().map(|e| json!({"query": e.query, "reference": e.reference, "cost": e.cost})).collect::<Vec<_>>(),
        }),
    );
    Ok(())
}

fn frame_by_ref(ds: &Dataset, (e, n): (u32, usize)) -> Result<&Frame> {
    experience_by_id(ds, e)?
        .frames
        .get(n)
        .ok_or_else(|| Error::InvalidConfig(format!("experience {e} has no frame {n}")))
}

fn read_map(path: &Path) -> Result<FeatureMap> {
    let grid = DenseGrid::read(path)?;
    FeatureMap::from_grid(&grid).map_err(|e| Error::CorruptDataset {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Pose of `tgt` relative to `src`, from the dataset's rendered maps
/// (`maps == "gt"`) or from a model file.
fn pose_pair(
    params: &PoseParams,
    root: &Path,
    ds: &Dataset,
    src: (u32, usize),
    tgt: (u32, usize),
    maps: &str,
    dst: &Path,
) -> Result<()> {
    params.validate()?;
    let (fs, ft) = (frame_by_ref(ds, src)?, frame_by_ref(ds, tgt)?);
    let (ms, mt) = if maps == "gt" {
        (read_feature_map(root, src.0, src.1)?, read_feature_map(root, tgt.0, tgt.1)?)
    } else {
        let model = DescriptorModel::load(Path::new(maps))?;
        (emtrain::forward(&model, fs), emtrain::forward(&model, ft))
    };
    let est = estimate_pose(&ms, &frame_disparity(fs), &mt, &frame_disparity(ft), &ds.camera, params)?;
    let doc = json!({
        "transform": est.transform,
        "inlier_count": est.inlier_count,
        "loss": est.loss,
    });
    info("pose", doc.clone());
    write_file(dst, serde_json::to_string_pretty(&doc).expect("json").as_bytes())
}

#[allow(clippy::too_many_arguments)]
fn train(
    cfg: &PipelineConfig,
    #[allow(unused_variables)] dataset_path: &Path,
    ds: &Dataset,
    pairs: &[SampledPair],
    heldout: Option<&[SampledPair]>,
    model_out: &Path,
    report_out: &Path,
) -> Result<()> {
    cfg.train.validate()?;
    #[cfg(feature = "ground-truth")]
    let held = match heldout {
        Some(h) => {
            let truth = seqloc::simworld::load_ground_truth(dataset_path)?;
            let cache = FrameCache::build(ds, h, cfg.train.prototypes)?;
            Some((truth, cache, h))
        }
        None => None,
    };
    #[cfg(feature = "ground-truth")]
    let eval_fn = held.as_ref().map(|(truth, cache, h)| {
        move |m: &DescriptorModel| {
            emtrain::pose_errors(m, ds, cache, h, truth, &cfg.train.pose).map(|e| emtrain::mean_pose_error(&e))
        }
    });
    #[cfg(feature = "ground-truth")]
    let eval: Option<emtrain::Evaluator> = eval_fn.as_ref().map(|f| f as emtrain::Evaluator);
    #[cfg(not(feature = "ground-truth"))]
    let eval: Option<emtrain::Evaluator> = {
        let _ = heldout;
        None
    };

    let (model, report) = emtrain::train(ds, pairs, cfg.epochs, cfg.seed, &cfg.train, eval)?;
    create_parent(model_out)?;
    model.save(model_out)?;
    create_parent(report_out)?;
    report.write_csv(report_out)?;
    log_report(&report);
    Ok(())
}

fn log_report(report: &TrainReport) {
    if let (Some(a), Some(b)) = (report.initial(), report.last()) {
        info(
            "train_summary",
            json!({
                "epochs": b.epoch,
                "initial_loss": a.mean_loss,
                "final_loss": b.mean_loss,
                "initial_inliers": a.mean_inliers,
                "final_inliers": b.mean_inliers,
                "final_skipped": b.skipped,
            }),
        );
    }
}

#[cfg(feature = "ground-truth")]
fn quantiles(mut v: Vec<f64>) -> serde_json::Value {
    v.sort_by(f64::total_cmp);
    let q = |p: f64| -> f64 {
        if v.is_empty() {
            return f64::NAN;
        }
        let x = p * (v.len() - 1) as f64;
        let (lo, hi) = (x.floor() as usize, x.ceil() as usize);
        v[lo] + (v[hi] - v[lo]) * (x - lo as f64)
    };
    let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
    json!({
        "mean": mean,
        "min": q(0.0),
        "p25": q(0.25),
        "median": q(0.5),
        "p75": q(0.75),
        "p90": q(0.9),
        "max": q(1.0),
    })
}

#[cfg(feature = "ground-truth")]
fn evaluate(
    cfg: &PipelineConfig,
    dataset_path: &Path,
    ds: &Dataset,
    model: &DescriptorModel,
    pairs: &[SampledPair],
    dst: &Path,
    summary: Option<&Path>,
) -> Result<()> {
    cfg.train.pose.validate()?;
    let truth = seqloc::simworld::load_ground_truth(dataset_path)?;
    let cache = FrameCache::build(ds, pairs, model.k)?;
    let errors = emtrain::pose_errors(model, ds, &cache, pairs, &truth, &cfg.train.pose)?;
    create_parent(dst)?;
    table::write_csv(dst, &errors, &emtrain::EVAL_HEADER)?;
    let s = json!({
        "pairs": errors.len(),
        "failed": errors.iter().filter(|e| e.inliers == 0).count(),
        "rot_err_deg": quantiles(errors.iter().map(|e| e.rot_err_deg).collect()),
        "trans_err_m": quantiles(errors.iter().map(|e| e.trans_err_m).collect()),
        "inliers": quantiles(errors.iter().map(|e| e.inliers as f64).collect()),
    });
    info("eval_summary", s.clone());
    if let Some(p) = summary {
        write_file(p, serde_json::to_string_pretty(&s).expect("json").as_bytes())?;
    }
    Ok(())
}

fn pipeline(cfg: &PipelineConfig, out: &Outputs, simulate_first: bool, dataset: Option<PathBuf>) -> Result<(), Failure> {
    let ds_path = dataset
        .or_else(|| cfg.dataset.clone())
        .unwrap_or_else(|| out.path(Path::new("dataset")));
    stage("setup", || {
        write_file(&out.path(Path::new("config.json")), cfg.to_json().as_bytes())
    })?;
    if simulate_first {
        stage("simulate", || simulate(cfg, &ds_path))?;
    }
    let ds = load(&ds_path)?;
    let jobs: Vec<(u32, u32)> = neighbour_jobs(ds.experiences.len(), cfg.graph_k)
        .into_iter()
        .map(|(i, j)| (ds.experiences[i].id, ds.experiences[j].id))
        .collect();
    let raw_path = |q: u32, r: u32| out.path(Path::new(&format!("raw_{q}_{r}.csv")));

    stage("seqslam", || {
        for &(q, r) in &jobs {
            let dm = out.path(Path::new(&format!("diff_{q}_{r}.csv")));
            seqslam_pair(cfg, &ds, q, r, &raw_path(q, r), Some(&dm)).map_err(|e| edge_error(q, r, e))?;
        }
        Ok(())
    })?;

    let sets = stage("validate", || {
        cfg.validation.validate()?;
        jobs.iter()
            .map(|&(q, r)| {
                let raw = read_raw_matches(&raw_path(q, r))?;
                let cs = validate_pair(cfg, &ds, q, r, &raw).map_err(|e| edge_error(q, r, e))?;
                cs.write_csv(&out.path(&match_file_name(q, r)))?;
                Ok(cs)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let graph = stage("graph", || {
        let g = ExperienceGraph::from_sets(ds.experiences.iter().map(|e| e.id).collect(), sets);
        save_graph(&g, &out.path(Path::new("graph.json")))?;
        Ok(g)
    })?;

    let (pairs, heldout) = stage("sample", || {
        let sets = indirect_sets(&graph)?;
        let pairs = sample_pairs(&sets, cfg.pairs, cfg.seed)?;
        write_pairs(&out.path(Path::new("pairs.csv")), &pairs)?;
        let heldout = sample_disjoint_pairs(&sets, cfg.heldout_pairs, cfg.seed, &pairs)?;
        write_pairs(&out.path(Path::new("heldout.csv")), &heldout)?;
        Ok((pairs, heldout))
    })?;

    let model_path = out.path(Path::new("model.bin"));
    stage("train", || {
        train(
            cfg,
            &ds_path,
            &ds,
            &pairs,
            Some(&heldout),
            &model_path,
            &out.path(Path::new("report.csv")),
        )
    })?;

    #[cfg(feature = "ground-truth")]
    stage("eval", || {
        let model = DescriptorModel::load(&model_path)?;
        evaluate(
            cfg,
            &ds_path,
            &ds,
            &model,
            &heldout,
            &out.path(Path::new("eval.csv")),
            Some(&out.path(Path::new("eval_summary.json"))),
        )
    })?;
    #[cfg(not(feature = "ground-truth"))]
    info("stage_skipped", json!({ "stage": "eval", "reason": "built without ground-truth support" }));
    Ok(())
}

fn edge_error(query: u32, reference: u32, e: Error) -> Error {
    match e {
        Error::InvalidConfig(_) | Error::Io { .. } | Error::CorruptDataset { .. } => e,
        e => Error::Edge {
            query,
            reference,
            source: Box::new(e),
        },
    }
}
