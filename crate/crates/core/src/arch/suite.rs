use super::{presets, BodyKind, Stage};
use crate::attention::AttentionConfig;
use crate::error::Result;
use crate::nn::{Ctx, ParamBuilder};
use crate::tensor::{grad_check, GradCheckReport, Tensor};

/// The toy attention config of `body` shrunk to fit an 8×12 map at 8 channels.
pub fn small_attention(body: BodyKind) -> AttentionConfig {
    let mut a = presets::toy(body).attention;
    a.heads = a.heads.min(2);
    a.window = a.window.min(4);
    if a.rect.is_some() {
        a.rect = Some([2, 4]);
    }
    if !a.scales.is_empty() {
        a.scales = vec![2, 4];
    }
    a
}

/// Finite-difference check of a two-block stage of every body, in the input
/// and in every parameter tensor, on an `[8, 8, 12]` map.
pub fn body_suite(tol: f64) -> Result<Vec<(String, GradCheckReport)>> {
    let (c, h, w) = (8, 8, 12);
    let x = Tensor::from_fn(&[c, h, w], |i| ((i * 7919) % 211) as f64 / 105.5 - 1.0);
    let probe = Tensor::from_fn(&[c, h, w], |i| ((i * 31) % 17) as f64 / 8.0 - 1.0);
    let mut out = Vec::new();
    for body in BodyKind::ALL {
        let attn = small_attention(body);
        let mut pb = ParamBuilder::new(5);
        let stage = Stage::new(
            &mut pb,
            &attn,
            body.default_ffn(),
            body.default_norm(),
            2,
            c,
            attn.heads,
            2 * c,
        )?;
        let store = pb.finish().cast::<f64>();
        let rep = grad_check(
            |tape, xv| {
                let params = store.bind(tape, false);
                let cx = Ctx::new(&params);
                stage
                    .forward(&cx, xv, "g")?
                    .mul(tape.constant(probe.clone()))
                    .map(|y| y.sum())
            },
            &x,
            1e-6,
            tol,
        )?;
        out.push((format!("{}.input", body.name()), rep));
        for (i, (name, value)) in store.iter().enumerate() {
            let rep = grad_check(
                |tape, p| {
                    let mut params = store.bind(tape, false);
                    params[i] = p;
                    let cx = Ctx::new(&params);
                    stage
                        .forward(&cx, tape.constant(x.clone()), "g")?
                        .mul(tape.constant(probe.clone()))
                        .map(|y| y.sum())
                },
                value,
                1e-6,
                tol,
            )?;
            out.push((format!("{}.{name}", body.name()), rep));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_body_passes() {
        let results = body_suite(1e-4).unwrap();
        assert!(results.len() > 7 * 10);
        for (name, r) in results {
            assert!(r.pass, "{name}: {r:?}");
        }
    }
}
