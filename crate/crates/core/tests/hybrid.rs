mod common;

use common::{random_metadata, randomize, rng, tiny_dataset, tiny_model};
use uifm::{EmbeddingMode, RESERVED, UNK};

#[test]
fn trained_entities_mix_id_and_metadata() {
    let ds = tiny_dataset(60, 1);
    let mut model = tiny_model::<f64>(&ds, EmbeddingMode::Full, 5);
    randomize(&mut model.store, 0.4, 12);
    let table = model.store.by_name("hybrid.id_table").unwrap().value.clone();
    let e = RESERVED as u32;
    let meta = model.catalog().metadata(e).unwrap().clone();
    let f = model.fuse_entity(Some(e), &meta).unwrap();
    assert_eq!(f.v_id, table.row(RESERVED));
    for j in 0..f.v_final.len() {
        let want = f.gate[j] * f.v_id[j] + (1.0 - f.gate[j]) * f.v_meta[j];
        assert!((f.v_final[j] - want).abs() < 1e-12);
    }
}

#[test]
fn cold_entities_in_catalog_use_no_id_row() {
    let ds = tiny_dataset(60, 1);
    let model = tiny_model::<f64>(&ds, EmbeddingMode::Full, 5);
    let cold: Vec<u32> = ds.cold_entities().into_iter().collect();
    assert!(!cold.is_empty());
    let table = model.entity_embeddings().unwrap();
    for c in cold {
        assert!(!model.catalog().is_trained(c));
        let meta = model.catalog().metadata(c).unwrap();
        let f = model.fuse_entity(Some(c), meta).unwrap();
        assert!(f.v_id.iter().all(|&x| x == 0.0));
        let row = &table.iter().find(|(i, _)| *i == c).unwrap().1;
        assert_eq!(row, &f.v_final);
    }
}

#[test]
fn no_cold_start_ablation_falls_back_to_unk() {
    let ds = tiny_dataset(60, 1);
    let model = tiny_model::<f64>(&ds, EmbeddingMode::NoColdStart, 5);
    let unk = model.store.by_name("hybrid.id_table").unwrap().value.row(UNK as usize).to_vec();
    let mut r = rng(4);
    let meta = random_metadata(&model.cast::<f32>(), &mut r);
    let f = model.fuse_entity(None, &meta).unwrap();
    assert!(f.gate.iter().all(|&g| g == 1.0));
    assert_eq!(f.v_final, unk);
    let warm = RESERVED as u32;
    let f = model.fuse_entity(Some(warm), model.catalog().metadata(warm).unwrap()).unwrap();
    assert_eq!(f.v_final, model.store.by_name("hybrid.id_table").unwrap().value.row(RESERVED));
}

#[test]
fn cold_candidates_receive_finite_distinct_scores() {
    let ds = tiny_dataset(60, 1);
    let mut model = tiny_model::<f64>(&ds, EmbeddingMode::Full, 5);
    randomize(&mut model.store, 0.3, 2);
    let h = vec![0.5; model.config().backbone.d_model];
    let cold: Vec<u32> = ds.cold_entities().into_iter().collect();
    let scores = model.score_candidates(&h, &cold).unwrap();
    assert!(scores.iter().all(|s| s.is_finite()));
    assert!(scores.windows(2).any(|w| w[0] != w[1]));
    assert!(model.score_candidates(&h, &[]).is_err());
}
