// Scratch experiment (will be deleted): pretrain quality + linear probe + timing.
use lrnas_core::dataset::generate_dataset;
use lrnas_core::graph::{build_desk_model, evaluate, pretrain, PretrainSchedule};
use lrnas_core::tensor::Tensor;
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let data = generate_dataset(1234);
    println!("dataset: {:?}", t0.elapsed());

    // Linear probe: multinomial logistic regression, full-batch GD.
    let t1 = Instant::now();
    let n = data.train.len();
    let pix = 768;
    let x = Tensor::from_vec(&[n, pix], data.train.images.clone()).unwrap();
    let w = Tensor::param(&[pix, 10], vec![0.0; pix * 10]).unwrap();
    let b = Tensor::param(&[10], vec![0.0; 10]).unwrap();
    let mut opt = lrnas_core::optim::Sgd::new(0.1, 0.9, 1e-4);
    for it in 0..300 {
        w.zero_grad(); b.zero_grad();
        let logits = x.matmul(&w).unwrap().add_bias(&b).unwrap();
        let loss = logits.cross_entropy_mean(&data.train.labels).unwrap();
        loss.backward().unwrap();
        opt.step(&[w.clone(), b.clone()]);
        if it % 100 == 0 { println!("linear iter {it} loss {}", loss.item()); }
    }
    let xv = Tensor::from_vec(&[data.val.len(), pix], data.val.images.clone()).unwrap();
    let logits = xv.matmul(&w).unwrap().add_bias(&b).unwrap();
    let lv = logits.to_vec();
    let mut hits = 0;
    for (i, &lab) in data.val.labels.iter().enumerate() {
        let row = &lv[i * 10..(i + 1) * 10];
        let mut best = 0;
        for j in 1..10 { if row[j] > row[best] { best = j; } }
        if best == lab { hits += 1; }
    }
    println!("linear probe val top1: {:.4} ({:?})", hits as f64 / data.val.len() as f64, t1.elapsed());

    // Desk pretrain.
    let t2 = Instant::now();
    let g = build_desk_model(1234).unwrap();
    let schedule = PretrainSchedule { seed: 1234, ..Default::default() };
    let (trained, history) = pretrain(g, &data.train.images, &data.train.labels, &schedule).unwrap();
    println!("pretrain {:?} loss history: {:?}", t2.elapsed(), history);
    let val_batches = data.val.batches(250).unwrap();
    let (top1, top5) = evaluate(&trained, &val_batches).unwrap();
    println!("desk val top1 {:.4} top5 {:.4}", top1, top5);
    let train_batches = data.train.batches(250).unwrap();
    let (tt1, _) = evaluate(&trained, &train_batches).unwrap();
    println!("desk train top1 {:.4}", tt1);
}
