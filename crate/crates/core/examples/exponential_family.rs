// Moving between moment and natural coordinates of a Gaussian family, and
// the quantities derived from the log-partition function.

use nalgebra::{dmatrix, dvector};
use supac::expfam::{FamilySpec, MomentParams};

pub fn run_example() -> supac::Result<()> {
    let family = FamilySpec::full(2)?;
    let moments = MomentParams::new(dvector![1.0, -0.5], dmatrix![1.0, 0.3; 0.3, 0.5]);
    let theta = family.natural_from_moments(&moments)?;
    println!("natural parameters {}", theta.to_json());
    println!("log-partition {:.6}", family.log_partition(&theta)?);
    println!("mean sufficient statistic {:.4?}", family.mean_suff_stat(&theta)?.as_slice());

    let prior = family.standard_normal();
    println!("KL to the standard normal {:.6}", family.kl(&theta, &prior)?);

    let back = family.moments_from_natural(&theta)?;
    println!("recovered mean {:.4?}", back.mean.as_slice());

    // Block-diagonal families drop cross-block quadratic terms.
    let blocks = FamilySpec::block(3, vec![vec![0, 1], vec![2]])?;
    println!("full(3) has {} parameters, block(3) has {}", FamilySpec::full(3)?.dim(), blocks.dim());
    let draws = family.sample(&theta, 5, 42)?;
    println!("five draws: {draws:.3?}");
    Ok(())
}

#[allow(dead_code)]
fn main() -> supac::Result<()> {
    run_example()
}
