//! Inspects multi-scale attention with shared query/key projections: scores
//! are symmetric and a consumer block reuses the provider's attention maps.

use std::cell::RefCell;

use fair_denoise::attention::MultiScaleAttention;
use fair_denoise::nn::{AttentionProbe, Ctx, ParamBuilder, ParamStore};
use fair_denoise::rng::Gaussian;
use fair_denoise::tensor::{Tape, Tensor};

fn main() -> fair_denoise::Result<()> {
    let scales = [2, 4];
    let mut pb = ParamBuilder::new(0);
    let provider = pb.scope("provider", |pb| {
        MultiScaleAttention::new(pb, 8, &scales, true, false)
    })?;
    let consumer = pb.scope("consumer", |pb| {
        MultiScaleAttention::new(pb, 8, &scales, true, true)
    })?;
    let store: ParamStore<f64> = pb.finish().cast();
    println!("parameters: {}", store.names().join(", "));

    let mut g = Gaussian::new(1);
    let x = Tensor::from_fn(&[8, 16, 16], |_| g.next());
    let tape = Tape::new();
    let params = store.bind(&tape, false);
    let probe = RefCell::new(AttentionProbe::default());
    let cx = Ctx::with_probe(&params, &probe);
    let (y, maps) = provider.forward(&cx, tape.constant(x), None, "provider")?;
    consumer.forward(&cx, y, Some(&maps), "consumer")?;
    for r in &probe.borrow().records {
        let asym = r.scores.as_ref().map(|s| {
            let n = s.shape()[1];
            (0..s.shape()[0])
                .flat_map(|b| (0..n).flat_map(move |i| (0..n).map(move |j| (b, i, j))))
                .map(|(b, i, j)| (s.at(&[b, i, j]) - s.at(&[b, j, i])).abs())
                .fold(0.0, f64::max)
        });
        println!(
            "{:<16} maps {:?} score asymmetry {asym:?}",
            r.label,
            r.maps.shape()
        );
    }
    Ok(())
}
