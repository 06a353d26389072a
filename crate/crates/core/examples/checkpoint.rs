//! Save a model, load it back, and watch a mismatched configuration get
//! refused.
//!
//! cargo run --example checkpoint

use hyperei::model::{build_model, load_checkpoint, save_checkpoint, AttentionMode, ModelConfig};

fn main() -> hyperei::Result<()> {
    let dir = std::env::temp_dir().join(format!("hyperei-checkpoint-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| hyperei::Error::Io { path: dir.clone(), source: e })?;
    let path = dir.join("model.hei");

    let cfg = ModelConfig {
        base_channels: 8,
        depth: 2,
        ..ModelConfig::new(8)
    };
    let params = build_model(&cfg)?;
    save_checkpoint(&params, &path)?;
    let size = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
    println!("saved {} parameters ({size} bytes) to {}", params.parameter_count(), path.display());

    let back = load_checkpoint(&path, Some(&cfg))?;
    assert_eq!(back, params);
    println!("reloaded with matching config: identical parameters");

    let other = ModelConfig {
        attention_mode: AttentionMode::None,
        ..cfg
    };
    match load_checkpoint(&path, Some(&other)) {
        Err(e) => println!("loading with a different config fails: {e}"),
        Ok(_) => println!("unexpected: mismatched config accepted"),
    }
    let _ = std::fs::remove_dir_all(&dir);
    Ok(())
}
