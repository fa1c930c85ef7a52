//! Batch-hard triplet mining on a handful of embeddings and the
//! probabilistic Chamfer loss between two keypoint sets.

use egonn::losses::{chamfer_loss, column, mine_batch_hard, pose_masks, triplet_loss, LossConfig};
use egonn::sparse_ad::{Mat, Tape};
use nalgebra::Vector3;

fn main() {
    let cfg = LossConfig::toy();
    // Two places 50 m apart, two scans each.
    let positions = [0.0, 1.0, 50.0, 51.0].map(|x| Vector3::new(x, 0.0, 0.0));
    let emb = Mat::from_shape_vec((4, 2), vec![1.0, 0.0, 0.8, 0.6, 0.9, 0.1, 0.0, 1.0]).unwrap();
    let (pos, neg) = pose_masks(&positions, &cfg);
    let triplets = mine_batch_hard(&emb, &pos, &neg);
    for t in &triplets {
        println!("anchor {} hardest positive {} hardest negative {}", t.anchor, t.positive, t.negative);
    }
    let mut tape = Tape::new();
    let e = tape.leaf(emb);
    let loss = triplet_loss(&mut tape, e, &triplets, cfg.margin);
    println!("triplet loss {:.4}", tape.scalar(loss));

    let qa = tape.leaf(Mat::from_shape_vec((3, 3), vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0, 0.0]).unwrap());
    let qb = tape.leaf(Mat::from_shape_vec((3, 3), vec![0.1, 0.0, 0.0, 1.0, 0.2, 0.0, 0.0, 2.0, 0.5]).unwrap());
    for s in [0.05, 0.5] {
        let sa = tape.leaf(column(&[s; 3]));
        let sb = tape.leaf(column(&[s; 3]));
        let loss = chamfer_loss(&mut tape, qa, qb, sa, sb);
        println!("chamfer loss with uncertainty {s}: {:.4}", tape.scalar(loss));
    }
}
