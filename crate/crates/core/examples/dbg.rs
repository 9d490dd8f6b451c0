use std::time::Instant;
use capnet_core::layers::{Binder, GradStore};
use capnet_core::model::*;
use capnet_core::synthdata::*;
use capnet_core::tape::Tape;
use capnet_core::training::*;

fn main() {
    let model = CapnetModel::init(ModelConfig::default(), 7).unwrap();
    println!("params: {}", model.num_params());
    let spec = SampleSpec { label: Some("hello42".into()), baseline_kind: Some(BaselineKind::Arc), noise_sigma: 0.02 };
    let s = render_sample(3, &spec, &GenParams::default()).unwrap();
    let pixels = quantize(&s.image);
    let image = image_tensor(&pixels, 64, 256).unwrap();
    let centers: Vec<(f64,f64)> = s.boxes.iter().map(|b| b.center).collect();
    let mut target: Vec<usize> = capnet_core::seq2seq::Alphabet::encode(&s.label).unwrap();
    target.push(capnet_core::seq2seq::Alphabet::EOS);

    // forward only
    let t0 = Instant::now();
    let n_iter = 5;
    for _ in 0..n_iter {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let fwd = model.forward_sample(&mut tape, &mut binder, &image, SamplePooling::GroundTruthCenters { centers: &centers }).unwrap();
        let _tf = model.seq2seq.decode_teacher_forced(&mut tape, &mut binder, &fwd.enc, &target).unwrap();
    }
    println!("forward only: {:.1} ms/sample", t0.elapsed().as_secs_f64() * 1000.0 / n_iter as f64);

    // forward + losses + backward
    let t0 = Instant::now();
    for _ in 0..n_iter {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let fwd = model.forward_sample(&mut tape, &mut binder, &image, SamplePooling::GroundTruthCenters { centers: &centers }).unwrap();
        let tf = model.seq2seq.decode_teacher_forced(&mut tape, &mut binder, &fwd.enc, &target).unwrap();
        let gt = model.gt_heatmap(&s.boxes).unwrap();
        let loc = loc_loss(&mut tape, fwd.heat.logits, &gt).unwrap();
        let rec = rec_loss(&mut tape, tf.true_probs).unwrap();
        let loss = total_loss(&mut tape, Some((loc, 1.0)), rec.loss, &LossWeights::default()).unwrap();
        tape.backward(loss).unwrap();
        let mut store = GradStore::new();
        store.absorb(&tape, &binder);
    }
    println!("fwd+bwd: {:.1} ms/sample", t0.elapsed().as_secs_f64() * 1000.0 / n_iter as f64);
}
