//! Builds a tiny two-layer network on the tape, runs backward, and checks
//! one gradient entry against a central difference.

use oneshot_dil::tensor::gradcheck::{finite_diff_check, OpKind};
use oneshot_dil::tensor::{Graph, ParameterSet, Tensor};
use oneshot_dil::rng::SeedTree;

fn loss(params: &ParameterSet, x: &Tensor) -> oneshot_dil::Result<(f64, ParameterSet)> {
    let mut g = Graph::new();
    let xn = g.constant(x.clone())?;
    let (w1, b1) = (g.param(params, "w1")?, g.param(params, "b1")?);
    let (w2, b2) = (g.param(params, "w2")?, g.param(params, "b2")?);
    let h = g.linear(xn, w1, Some(b1))?;
    let h = g.relu(h);
    let logits = g.linear(h, w2, Some(b2))?;
    let l = g.softmax_cross_entropy(logits, &[0, 1])?;
    Ok((g.value(l).item(), g.param_grads(l, params)?))
}

fn main() -> oneshot_dil::Result<()> {
    let mut params = ParameterSet::new();
    params.insert("w1", Tensor::new(vec![3, 2], vec![0.5, -0.2, 0.1, 0.4, -0.3, 0.8])?)?;
    params.insert("b1", Tensor::vector(vec![0.0, 0.1, -0.1]))?;
    params.insert("w2", Tensor::new(vec![2, 3], vec![0.3, -0.6, 0.2, -0.1, 0.5, 0.7])?)?;
    params.insert("b2", Tensor::vector(vec![0.05, -0.05]))?;
    let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, -1.0, 0.5])?;

    let (value, grads) = loss(&params, &x)?;
    println!("loss {value:.6}");
    for (name, g) in grads.iter() {
        println!("d loss / d {name} = {:?}", g.data());
    }

    let eps = 1e-6;
    let mut bumped = params.clone();
    bumped.get_mut("w1").unwrap().data_mut()[0] += eps;
    let plus = loss(&bumped, &x)?.0;
    bumped.get_mut("w1").unwrap().data_mut()[0] -= 2.0 * eps;
    let minus = loss(&bumped, &x)?.0;
    println!(
        "w1[0,0]: analytic {:.8}, central difference {:.8}",
        grads.get("w1").unwrap().data()[0],
        (plus - minus) / (2.0 * eps)
    );

    let mut rng = SeedTree::new(0).stream("fd");
    for kind in OpKind::ALL {
        println!("{kind:?}: relative error {:.2e}", finite_diff_check(kind, &mut rng, 1e-6)?);
    }
    Ok(())
}
