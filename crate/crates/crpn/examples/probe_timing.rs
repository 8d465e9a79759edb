use crpn::model::*;
use crpn::tensor::{conv2d, cross_correlate, Tensor};
use crpn::tracker;
use crpn::training::{synth_sequence, SynthConfig};
use std::time::Instant;

fn bench<F: FnMut()>(label: &str, mut f: F) {
    let t0 = Instant::now();
    let mut n = 0;
    while t0.elapsed().as_secs_f64() < 1.5 {
        f();
        n += 1;
    }
    println!("{label:<28} {:7.3} ms", 1e3 * t0.elapsed().as_secs_f64() / n as f64);
}

fn main() {
    let params = ModelParams::<f32>::init(ArchConfig::reference(), 5).unwrap();
    let seq = synth_sequence(&SynthConfig::default(), 7, 3);
    let state0 = tracker::init(&seq.frames[0], &seq.gt[0], &params, Default::default()).unwrap();
    let (crop, _) =
        tracker::extract_search_region(&seq.frames[1], &seq.gt[0], params.arch.search_size).unwrap();
    let (x_pyr, _) = extract_features(&params, &crop).unwrap();

    // stage-2 shapes: kernels over the 32x32 level
    let (kc, kr) = &state0.template().stages[1];
    let phi_x = &x_pyr.levels[1];
    let h = &params.heads[1];
    let sx = conv2d(phi_x, &h.cls_x.weight.value, Some(&h.cls_x.bias.value), 1, 1).unwrap();

    bench("sx conv 3x3 32->32 @32x32", || {
        let _ = conv2d(phi_x, &h.cls_x.weight.value, Some(&h.cls_x.bias.value), 1, 1).unwrap();
    });
    bench("corr cls [10,32,16,16]", || {
        let _ = cross_correlate(kc, &sx).unwrap();
    });
    bench("corr reg [20,32,16,16]", || {
        let _ = cross_correlate(kr, &sx).unwrap();
    });
    let blk = &params.ftb[0];
    bench("ftb deconv+fuse", || {
        let _ = ftb_fuse(&x_pyr.levels[0], &x_pyr.levels[1], blk).unwrap();
    });
    let big = Tensor::<f32>::zeros(&[30, 17, 17]);
    bench("resize 17->9 [30ch]", || {
        let _ = crpn::tensor::resize_bilinear(&big, 9, 9).unwrap();
    });
}
