use mjollnir::conv::{conv2d, ConvSpec};
use mjollnir::tensor::Tensor4;
use std::time::Instant;

fn main() {
    let x = Tensor4::<f32>::from_fn([1, 192, 120, 360], |_, c, h, w| {
        ((c * 7 + h * 3 + w) % 1000) as f32 * 1e-3
    });
    let w = Tensor4::<f32>::from_fn([768, 192, 1, 1], |co, ci, _, _| {
        ((co * 13 + ci * 7) % 997) as f32 * 1e-4 - 0.05
    });
    let t0 = Instant::now();
    let y = conv2d(&x, &w, None, &ConvSpec::pointwise(1)).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    let macs = 768.0 * 192.0 * (120.0 * 360.0);
    println!(
        "expand 192->768 @120x360: {:.3} s  ({:.2} GFLOP/s)  sample={}",
        dt,
        2.0 * macs / dt / 1e9,
        y.at(0, 0, 0, 0)
    );
    // depthwise 11x1 band at stage-3 width
    let xb = Tensor4::<f32>::from_fn([1, 24, 120, 360], |_, c, h, w| ((c + h + w) % 17) as f32);
    let wb = Tensor4::<f32>::from_fn([24, 1, 11, 1], |co, _, kh, _| (co + kh) as f32 * 1e-2);
    let spec = ConvSpec::depthwise_same(24, 11, 1);
    let t0 = Instant::now();
    let n = 10;
    for _ in 0..n {
        let _ = conv2d(&xb, &wb, None, &spec).unwrap();
    }
    println!("depthwise 11x1 24ch x10: {:.3} s", t0.elapsed().as_secs_f64());
}
