//! Saves a model with its optimizer state, reloads it and confirms the copy
//! is bit-identical.

use oneshot_dil::models::{load_checkpoint, save_checkpoint, Model, ModelSpec};
use oneshot_dil::optim::{AdamConfig, OptState};
use oneshot_dil::rng::SeedTree;

fn main() -> oneshot_dil::Result<()> {
    let spec = ModelSpec::small_cnn([1, 12, 12], &[4, 8], 5);
    let model = Model::build(&spec, &mut SeedTree::new(1).stream("init"))?;
    let opt = OptState::adam(model.params(), AdamConfig::default());
    println!("{} parameters in {} tensors, {} batch-norm layers", model.num_parameters(), model.params().len(), model.bn_states().len());

    let dir = std::env::temp_dir().join(format!("oneshot-dil-example-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("model.ckpt");
    save_checkpoint(&path, &model, Some(&opt))?;
    let (back, back_opt) = load_checkpoint(&path)?;
    println!("wrote {} bytes to {}", std::fs::metadata(&path)?.len(), path.display());
    println!("model identical: {}", back == model);
    println!("optimizer identical: {}", back_opt.as_ref() == Some(&opt));
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
