use ldb_core::ann::{train_index, IvfPqConfig, IvfPqIndex};
use ldb_core::flow::{forward, init_params, load_checkpoint, save_checkpoint, CheckpointMeta, FlowNetConfig};
use ldb_core::store::{load_embeddings, save_embeddings, EmbeddingMatrix};
use proptest::prelude::*;

fn matrix() -> impl Strategy<Value = EmbeddingMatrix> {
    (1usize..40, 0usize..30).prop_flat_map(|(dim, count)| {
        (
            prop::collection::vec(-1e30f32..1e30f32, dim * count),
            prop::collection::hash_set(any::<u64>(), count),
        )
            .prop_map(move |(data, ids)| {
                EmbeddingMatrix::new(dim, data, ids.into_iter().collect()).unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn fpe1_is_bit_exact(m in matrix()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fpe");
        save_embeddings(&m, &path).unwrap();
        let back = load_embeddings(&path).unwrap();
        prop_assert_eq!(back.dim(), m.dim());
        prop_assert_eq!(back.ids(), m.ids());
        let bits = |x: &EmbeddingMatrix| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&m));
        let len = std::fs::metadata(&path).unwrap().len();
        prop_assert_eq!(len, 20 + 8 * m.count() as u64 + 4 * (m.count() * m.dim()) as u64);
    }
}

#[test]
fn checkpoint_reproduces_forward_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = FlowNetConfig {
        dim: 16,
        time_dim: 8,
        width: 32,
        expansion: 64,
        depth: 3,
    };
    let mut params = init_params(cfg, 11).unwrap();
    params.values_mut().iter_mut().enumerate().for_each(|(i, v)| *v += (i % 7) as f32 * 1e-3);
    let path = dir.path().join("model.json");
    save_checkpoint(&params, &CheckpointMeta::default(), &path).unwrap();
    let (back, _) = load_checkpoint(&path).unwrap();
    let x = EmbeddingMatrix::from_data(16, (0..16 * 9).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
    let t: Vec<f32> = (0..9).map(|i| i as f32 / 8.0).collect();
    let a = forward(&params, &x, &t).unwrap();
    let b = forward(&back, &x, &t).unwrap();
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn index_reproduces_search_results() {
    let dir = tempfile::tempdir().unwrap();
    let data = ldb_core::fidelity::gaussian_noise(32, 3000, 5);
    let queries = ldb_core::fidelity::gaussian_noise(32, 100, 6);
    let cfg = IvfPqConfig {
        nlist: 16,
        m: 8,
        nprobe: 4,
        kmeans_iters: 10,
        ..IvfPqConfig::default()
    };
    let mut index = train_index(cfg, &data).unwrap();
    index.add(&data).unwrap();
    let path = dir.path().join("idx.ivpq");
    index.save(&path).unwrap();
    let back = IvfPqIndex::load(&path).unwrap();
    assert_eq!(back.search(&queries, 10).unwrap(), index.search(&queries, 10).unwrap());

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(IvfPqIndex::load(&path), Err(ldb_core::Error::Format(_))));
}
