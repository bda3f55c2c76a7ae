use pointdet::data::{self, Dataset, GenConfig};
use pointdet::eval;
use pointdet::infer::{infer, InferConfig};
use pointdet::loss::LossConfig;
use pointdet::model::{Model, ModelConfig};
use pointdet::train::{train, TrainConfig};

fn main() {
    let t0 = std::time::Instant::now();
    let train_dir = tempfile::tempdir().unwrap();
    let eval_dir = tempfile::tempdir().unwrap();
    data::generate(
        train_dir.path(),
        &GenConfig { num_scenes: 500, seed: 100, ..GenConfig::default() },
    )
    .unwrap();
    data::generate(
        eval_dir.path(),
        &GenConfig { num_scenes: 100, seed: 200, ..GenConfig::default() },
    )
    .unwrap();
    let ds = Dataset::load(train_dir.path()).unwrap();
    let ds_eval = Dataset::load(eval_dir.path()).unwrap();
    println!("data gen: {:.1}s", t0.elapsed().as_secs_f64());

    let batch: usize = std::env::var("B").ok().and_then(|s| s.parse().ok()).unwrap_or(2);
    let lr: f64 = std::env::var("LR").ok().and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let out = std::path::PathBuf::from(
        std::env::var("OUT").unwrap_or_else(|_| "/tmp/c4_out".into()),
    );
    std::fs::create_dir_all(&out).unwrap();
    let mut model = Model::init(ModelConfig::default(), 0).unwrap();
    let t1 = std::time::Instant::now();
    let res = train(
        &mut model,
        &ds,
        &TrainConfig { batch_size: batch, learning_rate: lr, ..TrainConfig::default() },
        &LossConfig::default(),
        &out,
        "echo",
    )
    .unwrap();
    println!("train: {:.1}s, final {:?}", t1.elapsed().as_secs_f64(), res.final_loss);

    let t2 = std::time::Instant::now();
    let mut dets = Vec::new();
    for scene in &ds_eval.scenes {
        dets.extend(infer(&model, &scene.image, scene.image_id, &InferConfig::default()).unwrap());
    }
    let dets: Vec<_> = dets.iter().map(eval::DetectionExport::from_detection).collect();
    let doc = data::CocoDoc::load(&eval_dir.path().join("annotations.json")).unwrap();
    let result = eval::evaluate(&dets, &doc).unwrap();
    println!("eval: {:.1}s over {} dets", t2.elapsed().as_secs_f64(), dets.len());
    println!("AP {:.4}  AP50 {:.4}  AP75 {:.4}", result.ap, result.ap50, result.ap75);
    for c in &result.per_class {
        println!("  {}: {:.4}", c.name, c.ap);
    }
    println!("total: {:.1}s", t0.elapsed().as_secs_f64());
}
