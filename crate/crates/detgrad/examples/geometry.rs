//! Detection geometry tour: IoU, score thresholding, candidate sets,
//! greedy NMS and TP/FP matching.
//!
//! Run with `cargo run --example geometry`.

use detgrad::detection::{
    candidate_set, iou, match_tp_fp, nms, score_threshold, BoundingBox, GroundTruthObject,
    ImageSample, Instance,
};

fn boxed(cx: f64, cy: f64, w: f64, h: f64) -> BoundingBox {
    BoundingBox::from_center(cx, cy, w, h)
}

fn inst(bbox: BoundingBox, score: f64, class_id: usize, anchor: usize) -> Instance {
    let mut probs = vec![0.1, 0.1, 0.1];
    probs[class_id - 1] = 0.8;
    Instance { bbox, score, class_probs: probs, class_id, anchor_index: anchor, raw_outputs: None }
}

fn main() {
    let a = boxed(20.0, 20.0, 10.0, 10.0);
    let b = boxed(24.0, 20.0, 10.0, 10.0);
    println!("IoU of two offset 10x10 boxes: {:.4}", iou(&a, &b));
    println!("IoU of a box with itself:      {:.4}", iou(&a, &a));

    // a cluster of three overlapping detections of one object plus a decoy
    let predictions = vec![
        inst(boxed(20.0, 20.0, 10.0, 10.0), 0.92, 1, 0),
        inst(boxed(21.0, 20.5, 10.5, 9.5), 0.85, 1, 1),
        inst(boxed(19.5, 19.0, 9.0, 10.5), 0.60, 1, 2),
        inst(boxed(70.0, 70.0, 12.0, 12.0), 0.40, 2, 3),
        inst(boxed(21.0, 20.0, 10.0, 10.0), 0.55, 2, 4), // same spot, other class
    ];

    let kept = score_threshold(&predictions, 0.5);
    println!("\nscore >= 0.5 keeps {} of {} boxes", kept.len(), predictions.len());

    let cands = candidate_set(&predictions[0], &predictions, 1e-4, 0.5);
    println!("candidate boxes of the top detection: {cands:?}");

    let survivors = nms(&predictions, 1e-4, 0.5);
    println!("NMS survivors ({}):", survivors.len());
    for s in &survivors {
        println!("  anchor {} class {} score {:.2}", s.anchor_index, s.class_id, s.score);
    }

    let sample = ImageSample {
        image_id: "demo".into(),
        image_width: 100.0,
        image_height: 100.0,
        predictions: survivors,
        ground_truth: vec![
            GroundTruthObject { bbox: boxed(20.5, 20.0, 10.0, 10.0), class_id: 1 },
            GroundTruthObject { bbox: boxed(40.0, 40.0, 8.0, 8.0), class_id: 2 },
        ],
    };
    println!("\nTP/FP matching at IoU 0.5:");
    for o in match_tp_fp(&sample, 0.5) {
        let p = &sample.predictions[o.pred_index];
        println!(
            "  anchor {} class {} -> {:?} (max same-class IoU {:.3})",
            p.anchor_index, p.class_id, o.label, o.matched_iou
        );
    }
}
