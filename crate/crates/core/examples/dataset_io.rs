//! Generates a labelled synthetic dataset and round-trips it through the CSV
//! and binary formats.

use siammm::data::{
    generate_synthetic_full, load_dataset, save_dataset, split_indices, DataFormat, InputMap,
    SyntheticSpec,
};

fn main() -> siammm::Result<()> {
    let spec = SyntheticSpec {
        proportions: vec![0.5, 0.3, 0.2],
        input_map: InputMap::RandomLinear,
        ..SyntheticSpec::new(3, 5, 25.0, 500, 17)
    };
    let synth = generate_synthetic_full(&spec)?;
    let data = &synth.dataset;
    let labels = data.labels().unwrap();
    let counts: Vec<usize> = (0..3)
        .map(|g| labels.iter().filter(|&&l| l == g).count())
        .collect();
    println!(
        "{} samples in d = {}, class counts {counts:?}",
        data.len(),
        data.dim()
    );
    println!("first row {:.3?}", data.features(0));

    let dir = tempfile_dir()?;
    for (file, format) in [
        ("toy.csv", DataFormat::Csv),
        ("toy.smmd", DataFormat::Binary),
    ] {
        let path = dir.join(file);
        save_dataset(data, &path, format)?;
        let back = load_dataset(&path, DataFormat::from_path(&path))?;
        let size = std::fs::metadata(&path)?.len();
        // The binary format stores features as f32.
        let max_err = back
            .samples()
            .iter()
            .zip(data.samples())
            .flat_map(|(a, b)| {
                a.features
                    .iter()
                    .zip(&b.features)
                    .map(|(x, y)| (x - y).abs())
            })
            .fold(0.0, f64::max);
        println!(
            "{file:<9} {size:>6} bytes, labels kept: {}, max feature error {max_err:.1e}",
            back.labels() == data.labels()
        );
    }

    let (train, test) = split_indices(data.len(), 0.8, 0)?;
    println!("80/20 split: {} train, {} test", train.len(), test.len());
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}

fn tempfile_dir() -> std::io::Result<std::path::PathBuf> {
    let dir = std::env::temp_dir().join(format!("siammm-dataset-io-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}
