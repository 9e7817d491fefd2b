use super::{build_network, LayerSpec, Network};
use crate::error::{Error, Result};
use crate::partition::{Decomposition, Partition};
use crate::tensor::Float;

/// Appends a trainable width-matching projector to every student block whose
/// boundary width differs from the teacher's, so each routed activation is
/// dimension-compatible. Returns the widened student and the decomposition
/// with student block ends shifted past the new layers.
///
/// Parameters of layers whose shapes are unchanged are carried over; the
/// projectors and any layer whose input width changed are freshly
/// initialized from `seed`.
pub fn insert_projectors<T: Float>(
    student: &Network<T>,
    teacher: &Network<T>,
    decomposition: &Decomposition,
    seed: u64,
) -> Result<(Network<T>, Decomposition)> {
    let k = decomposition.k();
    let mut after: Vec<(usize, usize)> = Vec::new();
    for j in 0..k.saturating_sub(1) {
        let se = decomposition.student.ends()[j];
        let te = decomposition.teacher.ends()[j];
        let ss = &student.layers()[se - 1].out_shape;
        let ts = &teacher.layers()[te - 1].out_shape;
        if ss.len() != ts.len() || ss[1..] != ts[1..] {
            return Err(Error::Incompatible(format!(
                "block {} boundary: student {ss:?} and teacher {ts:?} differ beyond width",
                j + 1
            )));
        }
        if ss[0] != ts[0] {
            after.push((se - 1, ts[0]));
        }
    }
    if after.is_empty() {
        return Ok((student.clone(), decomposition.clone()));
    }

    let mut specs = Vec::with_capacity(student.len() + after.len());
    let mut origin = Vec::with_capacity(student.len() + after.len());
    for (i, spec) in student.specs().into_iter().enumerate() {
        specs.push(spec);
        origin.push(Some(i));
        if let Some(&(_, width)) = after.iter().find(|(at, _)| *at == i) {
            specs.push(LayerSpec::Projector { out_width: width });
            origin.push(None);
        }
    }
    let mut widened: Network<T> = build_network(&specs, student.input_shape(), student.classes())?;
    for (new_idx, old) in origin.iter().enumerate() {
        match *old {
            Some(old) if student.layers()[old].in_shape == widened.layers()[new_idx].in_shape => {
                let src = &student.layers()[old];
                let dst = &mut widened.layers_mut()[new_idx];
                for (d, s) in dst.params.iter_mut().zip(&src.params) {
                    d.tensor = s.tensor.clone();
                    d.trainable = s.trainable;
                }
            }
            _ => widened.init_layer(new_idx, seed.wrapping_add(new_idx as u64))?,
        }
    }

    let shifted =
        decomposition.student.ends().iter().map(|&e| e + after.iter().filter(|(at, _)| *at < e).count()).collect();
    let d = Decomposition::from_partitions(decomposition.teacher.clone(), Partition::from_ends(shifted)?)?;
    d.validate(teacher, &widened)?;
    Ok((widened, d))
}
