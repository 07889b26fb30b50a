use agridistill::cli::tree_digest;
use agridistill::datamodel::load_manifest;
use agridistill::toydata::{default_suite, generate_toy_manifest, read_generation_record, render_mask, ShapeFamily};
use agridistill_core::domain::Category;

#[test]
fn three_domains_round_trip_through_the_loader() {
    let dir = tempfile::tempdir().unwrap();
    let specs = &default_suite(50, 64)[..3];
    let manifest = generate_toy_manifest(specs, dir.path(), 1).unwrap();
    assert_eq!(manifest.domains.len(), 3);
    assert_eq!(manifest.index.values().map(Vec::len).sum::<usize>(), 150);
    assert_eq!(load_manifest(dir.path()).unwrap(), manifest);
    let ds = manifest.dataset("ToyChard").unwrap();
    let s = ds.get(0).unwrap();
    assert_eq!((s.image.width(), s.image.height()), (64, 64));
    assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn generation_is_byte_deterministic() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let specs = default_suite(6, 32);
    generate_toy_manifest(&specs, a.path(), 9).unwrap();
    generate_toy_manifest(&specs, b.path(), 9).unwrap();
    generate_toy_manifest(&specs, c.path(), 10).unwrap();
    assert_eq!(tree_digest(a.path()).unwrap(), tree_digest(b.path()).unwrap());
    assert_ne!(tree_digest(a.path()).unwrap(), tree_digest(c.path()).unwrap());
}

#[test]
fn masks_match_recomputed_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_toy_manifest(&default_suite(12, 48), dir.path(), 4).unwrap();
    for d in &manifest.domains {
        let record = read_generation_record(&dir.path().join(&d.name)).unwrap();
        let ds = manifest.dataset(&d.name).unwrap();
        let (w, h) = record.spec.image_size;
        let (lo, hi) = record.spec.foreground_band;
        for (i, sample) in record.samples.iter().enumerate() {
            let loaded = ds.get(i).unwrap();
            assert_eq!(render_mask(&sample.foreground, w, h), loaded.mask, "{} {}", d.name, sample.stem);
            let f = loaded.mask.foreground_fraction();
            assert!(f >= lo && f <= hi, "{} {}: fraction {f}", d.name, sample.stem);
        }
    }
}

#[test]
fn suite_has_the_color_confound_and_all_categories() {
    let suite = default_suite(10, 32);
    let lettuce = suite.iter().find(|s| s.name == "ToyLettuce").unwrap();
    let vineyard = suite.iter().find(|s| s.name == "ToyVineyard").unwrap();
    assert_eq!(vineyard.clutter.as_ref().unwrap().palette, lettuce.foreground_palette);
    let cats: Vec<Category> = suite.iter().map(|s| s.category).collect();
    for c in [Category::Low, Category::Medium, Category::Tall] {
        assert!(cats.contains(&c));
    }
    let families: Vec<ShapeFamily> = suite.iter().map(|s| s.shape_family).collect();
    assert!(families.contains(&ShapeFamily::Blob) && families.contains(&ShapeFamily::TallColumn));
}
