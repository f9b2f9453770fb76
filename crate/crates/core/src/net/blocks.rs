use crate::nn::{Graph, ParamStore, Scalar, Var};

use super::{NetError, Result};

/// `conv(x)` with parameters `{name}.w` and `{name}.b`.
pub(crate) fn conv<T: Scalar>(g: &mut Graph<T>, p: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let w = g.param_named(p, &format!("{name}.w"))?;
    let b = g.param_named(p, &format!("{name}.b"))?;
    Ok(g.conv2d(x, w, b)?)
}

/// Mutual recalibration of a precipitation and an ancillary feature map:
/// each stream's features are gated by a sigmoid map computed from the other
/// stream, and the two gated maps are summed.
pub fn croa_block<T: Scalar>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    prefix: &str,
    fp: Var,
    fa: Var,
) -> Result<Var> {
    if g.value(fp).shape() != g.value(fa).shape() {
        return Err(NetError::Input(format!(
            "cross-attention operands {:?} vs {:?}",
            g.value(fp).shape(),
            g.value(fa).shape()
        )));
    }
    let hp = conv(g, p, &format!("{prefix}.hasa_p"), fp)?;
    let ha = conv(g, p, &format!("{prefix}.hasa_gate"), fa)?;
    let ha = g.sigmoid(ha)?;
    let hasa = g.mul(hp, ha)?;
    let la = conv(g, p, &format!("{prefix}.lpca_a"), fa)?;
    let lp = conv(g, p, &format!("{prefix}.lpca_gate"), fp)?;
    let lp = g.sigmoid(lp)?;
    let lpca = g.mul(la, lp)?;
    Ok(g.add(hasa, lpca)?)
}

/// Global cross-attention between the precipitation embedding and the joint
/// embedding of all ancillary factors.
pub fn gca_forward<T: Scalar>(g: &mut Graph<T>, p: &ParamStore<T>, fp: Var, fa_joint: Var) -> Result<Var> {
    croa_block(g, p, "gca", fp, fa_joint)
}

/// One cross-attention block per factor, concatenated and projected back to
/// the base width by a 1x1 convolution.
pub fn mfca_forward<T: Scalar>(g: &mut Graph<T>, p: &ParamStore<T>, fp: Var, factors: &[Var]) -> Result<Var> {
    let expected = p.iter().filter(|q| q.name.ends_with(".hasa_p.w") && q.name.starts_with("mfca.")).count();
    if factors.len() != expected {
        return Err(NetError::Input(format!(
            "expected {expected} factor embeddings, got {}",
            factors.len()
        )));
    }
    let outs = factors
        .iter()
        .enumerate()
        .map(|(i, &fa)| croa_block(g, p, &format!("mfca.{i}"), fp, fa))
        .collect::<Result<Vec<_>>>()?;
    let cat = g.concat(&outs)?;
    conv(g, p, "mfca.proj", cat)
}

/// Densely connected relu convolutions, 1x1 local fusion, local residual.
pub fn rdb_forward<T: Scalar>(g: &mut Graph<T>, p: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let mut feats = vec![x];
    let mut j = 0;
    while p.id(&format!("{prefix}.c{j}.w")).is_ok() {
        let input = if feats.len() == 1 { x } else { g.concat(&feats)? };
        let y = conv(g, p, &format!("{prefix}.c{j}"), input)?;
        feats.push(g.relu(y)?);
        j += 1;
    }
    let all = g.concat(&feats)?;
    let fused = conv(g, p, &format!("{prefix}.fuse"), all)?;
    Ok(g.add(x, fused)?)
}

/// Channel gate (pool, FC, sigmoid) plus spatial gate (conv to one channel,
/// sigmoid), summed, convolved and added back onto the input.
pub fn rab_forward<T: Scalar>(g: &mut Graph<T>, p: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let pooled = g.global_avg_pool(x)?;
    let fw = g.param_named(p, &format!("{prefix}.fc.w"))?;
    let fb = g.param_named(p, &format!("{prefix}.fc.b"))?;
    let cg = g.fully_connected(pooled, fw, fb)?;
    let cg = g.sigmoid(cg)?;
    let ca = g.mul_channel_gate(x, cg)?;
    let sg = conv(g, p, &format!("{prefix}.sa"), x)?;
    let sg = g.sigmoid(sg)?;
    let sa = g.mul_spatial_gate(x, sg)?;
    let both = g.add(ca, sa)?;
    let z = conv(g, p, &format!("{prefix}.out"), both)?;
    Ok(g.add(x, z)?)
}

/// `n_levels` of RDB followed by RAB; every level's output is kept and the
/// concatenation is fused by a 1x1 convolution.
pub fn rdam_forward<T: Scalar>(g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Result<Var> {
    let mut cur = x;
    let mut levels = Vec::new();
    let mut l = 0;
    while p.id(&format!("rdam.{l}.rdb.fuse.w")).is_ok() {
        cur = rdb_forward(g, p, &format!("rdam.{l}.rdb"), cur)?;
        cur = rab_forward(g, p, &format!("rdam.{l}.rab"), cur)?;
        levels.push(cur);
        l += 1;
    }
    if levels.is_empty() {
        return Err(NetError::Config("no RDAM levels in parameter set".into()));
    }
    let cat = g.concat(&levels)?;
    conv(g, p, "rdam.fuse", cat)
}
