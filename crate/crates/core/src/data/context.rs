//! In-context and out-of-context test sets for one class.
//!
//! For every instance `o` of the class, the in-context positive is the
//! scene `o` came from; the out-of-context positive pastes `o`'s masked
//! pixels, at the same location, onto a randomly chosen test scene that has
//! no instance of the class. Negatives are all scenes without the class and
//! are shared by both sets.

use super::Sample;
use crate::error::{invalid, Result};
use crate::masks::ObjectMask;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One positive: the instance `(sample, object)` it was built from and the
/// donor scene (out-of-context only).
#[derive(Clone, Debug, PartialEq)]
pub struct ContextPositive {
    pub sample: usize,
    pub object: usize,
    pub donor: Option<usize>,
    pub scene: Sample,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextSets {
    pub class: usize,
    pub in_context: Vec<ContextPositive>,
    pub out_of_context: Vec<ContextPositive>,
    /// Indices of test scenes without the class.
    pub negatives: Vec<usize>,
}

/// Pastes object `o` of `source` onto `donor`. The pasted object occludes
/// the donor's objects; donor objects left with no visible pixel are dropped.
pub fn paste_object(source: &Sample, o: usize, donor: &Sample) -> Result<Sample> {
    let obj = source
        .objects()
        .get(o)
        .ok_or_else(|| invalid!("object {o} out of range"))?;
    if donor.image().shape() != source.image().shape() {
        return Err(invalid!("donor and source scenes differ in size"));
    }
    let m = obj.mask().data();
    let image: Vec<f64> = donor
        .image()
        .data()
        .iter()
        .zip(source.image().data())
        .zip(m)
        .map(|((&d, &s), &mv)| if mv != 0.0 { s } else { d })
        .collect();
    let mut objects = Vec::new();
    for d in donor.objects() {
        let vis: Vec<f64> = d.mask().data().iter().zip(m).map(|(&a, &b)| if b != 0.0 { 0.0 } else { a }).collect();
        if vis.contains(&1.0) {
            objects.push(ObjectMask::new(Tensor::new(d.mask().shape().to_vec(), vis)?, objects.len(), d.label())?);
        }
    }
    objects.push(ObjectMask::new(obj.mask().clone(), objects.len(), obj.label())?);
    Sample::new(
        Tensor::new(donor.image().shape().to_vec(), image)?,
        objects,
        donor.split(),
        donor.seed(),
    )
}

/// Builds both context sets for `class` from `samples`; donor choice is
/// seeded.
pub fn make_context_sets(samples: &[Sample], class: usize, seed: u64) -> Result<ContextSets> {
    let negatives: Vec<usize> = (0..samples.len())
        .filter(|&i| !samples[i].labels().contains(&class))
        .collect();
    let instances: Vec<(usize, usize)> = samples
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            s.objects()
                .iter()
                .enumerate()
                .filter(|(_, o)| o.label() == class)
                .map(move |(k, _)| (i, k))
        })
        .collect();
    if !instances.is_empty() && negatives.is_empty() {
        return Err(invalid!("no donor scene without class {class}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(class as u64);
    let mut in_context = Vec::with_capacity(instances.len());
    let mut out_of_context = Vec::with_capacity(instances.len());
    for (i, k) in instances {
        let donor = negatives[rng.gen_range(0..negatives.len())];
        in_context.push(ContextPositive {
            sample: i,
            object: k,
            donor: None,
            scene: samples[i].clone(),
        });
        out_of_context.push(ContextPositive {
            sample: i,
            object: k,
            donor: Some(donor),
            scene: paste_object(&samples[i], k, &samples[donor])?,
        });
    }
    Ok(ContextSets {
        class,
        in_context,
        out_of_context,
        negatives,
    })
}
