use pointdet::checkpoint;
use pointdet::data::{self, Dataset, GenConfig};
use pointdet::eval;
use pointdet::geometry::iou;
use pointdet::infer::{infer, InferConfig};
use pointdet::model::{Model, ModelConfig};

fn main() {
    let ckpt = std::env::var("CKPT").unwrap_or_else(|_| "/tmp/c4_b8/model.ckpt".into());
    let train_dir = tempfile::tempdir().unwrap();
    let eval_dir = tempfile::tempdir().unwrap();
    data::generate(
        train_dir.path(),
        &GenConfig { num_scenes: 100, seed: 100, ..GenConfig::default() },
    )
    .unwrap();
    data::generate(
        eval_dir.path(),
        &GenConfig { num_scenes: 100, seed: 200, ..GenConfig::default() },
    )
    .unwrap();

    let mut model = Model::init(ModelConfig::default(), 0).unwrap();
    checkpoint::load_into(std::path::Path::new(&ckpt), &mut model.store).unwrap();

    for (name, dir) in [("train-subset", &train_dir), ("heldout", &eval_dir)] {
        let ds = Dataset::load(dir.path()).unwrap();
        let mut dets = Vec::new();
        for scene in &ds.scenes {
            dets.extend(
                infer(&model, &scene.image, scene.image_id, &InferConfig::default()).unwrap(),
            );
        }
        let exports: Vec<_> = dets.iter().map(eval::DetectionExport::from_detection).collect();
        let doc = data::CocoDoc::load(&dir.path().join("annotations.json")).unwrap();
        let r = eval::evaluate(&exports, &doc).unwrap();
        println!("{name}: AP {:.4} AP50 {:.4} AP75 {:.4} ({} dets)", r.ap, r.ap50, r.ap75, dets.len());
    }

    // Scene-level autopsy on three held-out scenes.
    let ds = Dataset::load(eval_dir.path()).unwrap();
    for scene in ds.scenes.iter().take(3) {
        println!("\nscene {} gts:", scene.image_id);
        for gt in &scene.gts {
            let b = &gt.bbox;
            println!(
                "  class {} box ({:.1},{:.1})-({:.1},{:.1}) size {:.0}x{:.0}",
                gt.class, b.x0, b.y0, b.x1, b.y1, b.width(), b.height()
            );
        }
        let dets = infer(&model, &scene.image, scene.image_id, &InferConfig::default()).unwrap();
        println!("  {} detections; top 8:", dets.len());
        for d in dets.iter().take(8) {
            let best = scene
                .gts
                .iter()
                .map(|gt| iou(&gt.bbox, &d.bbox))
                .fold(0.0f64, f64::max);
            println!(
                "    class {} score {:.3} box ({:.1},{:.1})-({:.1},{:.1}) best-iou {:.3}",
                d.class, d.score, d.bbox.x0, d.bbox.y0, d.bbox.x1, d.bbox.y1, best
            );
        }
    }
}
