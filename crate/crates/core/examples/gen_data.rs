//! Generate a DistractorDot dataset, write it as IGDS and read it back.

use infogate::worldgen::{generate_dataset, Dataset, DatasetSpec, DistractorLevel, EnvConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = DatasetSpec {
        env: EnvConfig {
            level: DistractorLevel::Hard,
            ..EnvConfig::default()
        },
        episodes: 10,
        seed: 7,
        ..DatasetSpec::default()
    };
    let data = generate_dataset(&spec)?;
    let dir = std::env::temp_dir().join("infogate-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("hard.igds");
    data.save(&path)?;
    let back = Dataset::load(&path)?;
    assert_eq!(back, data);

    let relevant: usize = data
        .records
        .iter()
        .map(|r| r.relevance_t.iter().filter(|&&on| on).count())
        .sum();
    let pixels = data.len() * data.meta.obs_shape[1] * data.meta.obs_shape[2];
    println!("wrote {} records to {}", data.len(), path.display());
    println!("channel means {:?}", data.meta.norm_mean);
    println!("channel stds  {:?}", data.meta.norm_std);
    println!("relevant pixel fraction {:.4}", relevant as f64 / pixels as f64);
    Ok(())
}
