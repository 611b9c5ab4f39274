use super::{Vae, VaeConfig};
use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

/// Build a causal video model from a trained per-image model.
///
/// Each `(kh, kw)` kernel lands on the last temporal tap of its `(kt, kh, kw)`
/// counterpart with the other taps zero. Under causal padding a lone frame
/// only ever meets that last tap, so single-frame outputs match the image
/// model exactly. Temporal resampling convs have no image counterpart and
/// start as identities on their last tap.
pub fn inflate_2d_to_3d(image: &Vae, config: &VaeConfig) -> Result<Vae> {
    ensure!(
        image.config == config.image_counterpart(),
        Error::invalid(
            "inflate_2d_to_3d",
            "image model config is not the per-frame counterpart of the target config"
        )
    );
    let mut out = Vae::new(config.clone(), 0)?;
    let ids: Vec<_> = out.params.ids().collect();
    for id in ids {
        let name = out.params.name(id).to_string();
        let target_shape = out.params.get(id).shape().to_vec();
        let value = match image.params.id(&name) {
            Some(src) => inflate_tensor(&name, image.params.get(src), &target_shape)?,
            None => identity_time_kernel(&name, &target_shape)?,
        };
        out.params.set(id, value)?;
    }
    Ok(out)
}

fn inflate_tensor(name: &str, src: &Tensor, target: &[usize]) -> Result<Tensor> {
    if src.shape() == target {
        return Ok(src.clone());
    }
    let s = src.shape();
    ensure!(
        s.len() == 5 && target.len() == 5 && s[2] == 1 && s[0] == target[0] && s[1] == target[1] && s[3..] == target[3..],
        Error::shape(
            "inflate_2d_to_3d",
            format!("parameter {name}"),
            format!("{target:?}"),
            format!("{s:?}")
        )
    );
    let kt = target[2];
    let spatial = s[3] * s[4];
    let mut data = vec![0.0f32; target.iter().product()];
    for oi in 0..s[0] * s[1] {
        let dst = (oi * kt + kt - 1) * spatial;
        data[dst..dst + spatial].copy_from_slice(&src.data()[oi * spatial..(oi + 1) * spatial]);
    }
    Tensor::new(target.to_vec(), data)
}

/// `(k * C, C, kt, 1, 1)` kernels mapping each channel to itself in every output group.
fn identity_time_kernel(name: &str, shape: &[usize]) -> Result<Tensor> {
    if name.ends_with(".b") {
        return Ok(Tensor::zeros(shape));
    }
    ensure!(
        shape.len() == 5 && shape[3] == 1 && shape[4] == 1 && shape[0] % shape[1] == 0,
        Error::invalid("inflate_2d_to_3d", format!("no image counterpart for {name}"))
    );
    let (o, c, kt) = (shape[0], shape[1], shape[2]);
    let mut t = Tensor::zeros(shape);
    for oc in 0..o {
        t.data_mut()[(oc * c + oc % c) * kt + kt - 1] = 1.0;
    }
    Ok(t)
}
