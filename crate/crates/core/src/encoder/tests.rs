use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::grad_check;
use crate::corpus::NormBox;

fn small_config() -> EncoderConfig {
    EncoderConfig {
        d_model: 8,
        layers: 2,
        heads: 2,
        ffn_mult: 2,
        max_len: 16,
        coord_buckets: 1001,
        visual_dim: 8,
        dropout: 0.0,
    }
}

fn tdoc(ids: &[usize], boxes: &[NormBox], positions: &[usize]) -> TokenizedDocument {
    let n = ids.len();
    TokenizedDocument {
        doc_id: "t".into(),
        token_ids: ids.to_vec(),
        tokens: ids.iter().map(|i| format!("w{i}")).collect(),
        cell_ids: vec![0; n],
        cell_index: vec![0; n],
        tags: vec![0; n],
        boxes: boxes.to_vec(),
        positions: positions.to_vec(),
        cell_spans: vec![Some(0..n)],
    }
}

fn nb(x: u16, y: u16, w: u16, h: u16) -> NormBox {
    NormBox { x, y, w, h }
}

fn setup() -> (ParamStore<f64>, Encoder) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let enc = Encoder::new(&mut store, &small_config(), 10, &mut rng).unwrap();
    (store, enc)
}

fn features(n: usize, seed: u64) -> Array<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * 8).map(|_| rand::Rng::gen_range(&mut rng, 0.0..1.0)).collect();
    Array::new(vec![n, 8], data).unwrap()
}

#[test]
fn identical_inputs_identical_rows() {
    let (store, enc) = setup();
    let b = nb(10, 20, 30, 40);
    let t = tdoc(&[4, 4], &[b, b], &[0, 0]);
    let mut g = Graph::new(&store);
    let vis = Array::zeros(&[2, 8]);
    let x = enc.embed_inputs(&mut g, &t, &vis).unwrap();
    let v = g.value(x);
    assert_eq!(v.row(0), v.row(1));
}

#[test]
fn zero_provider_matches_absent_features() {
    let (store, enc) = setup();
    let t = tdoc(&[4, 5], &[nb(1, 2, 3, 4), nb(5, 6, 7, 8)], &[0, 1]);
    let doc = crate::corpus::Document {
        id: "t".into(),
        lang: "en".into(),
        split: crate::corpus::Split::Train,
        cells: vec![crate::corpus::Cell {
            id: 0,
            text: "a b".into(),
            bbox: crate::corpus::BBox::new(0, 0, 5, 5),
            label: "OTHER".into(),
            visual_region: None,
        }],
        relations: vec![],
        img: crate::corpus::PageImage {
            fname: "f".into(),
            width: 10,
            height: 10,
        },
    };
    let zero = visual_features(&doc, &t, &ZeroVisual(8));
    let mut g = Graph::new(&store);
    let a = enc.encode(&mut g, &t, &zero).unwrap();
    let b = enc.encode(&mut g, &t, &Array::zeros(&[2, 8])).unwrap();
    assert_eq!(g.value(a), g.value(b));
}

#[test]
fn width_bucket_only_touches_its_table() {
    let (store, enc) = setup();
    let before = tdoc(&[4], &[nb(10, 20, 30, 40)], &[0]);
    let after = tdoc(&[4], &[nb(10, 20, 31, 40)], &[0]);
    let vis = Array::zeros(&[1, 8]);
    let mut g = Graph::new(&store);
    let a = enc.embed_inputs(&mut g, &before, &vis).unwrap();
    let b = enc.embed_inputs(&mut g, &after, &vis).unwrap();
    let w = store.value(enc.coords[2]);
    for c in 0..8 {
        let diff = g.value(b).get(0, c) - g.value(a).get(0, c);
        let expect = w.get(31, c) - w.get(30, c);
        assert!((diff - expect).abs() < 1e-12);
    }
}

#[test]
fn single_token_shape_and_determinism() {
    let (store, enc) = setup();
    let t = tdoc(&[7], &[nb(0, 0, 1000, 1000)], &[0]);
    let vis = features(1, 1);
    let mut g = Graph::new(&store);
    let h = enc.encode(&mut g, &t, &vis).unwrap();
    assert_eq!(g.shape(h), [1, 8]);
    let mut g2 = Graph::new(&store);
    let h2 = enc.encode(&mut g2, &t, &vis).unwrap();
    assert!(g
        .value(h)
        .data()
        .iter()
        .zip(g2.value(h2).data())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn overlength_and_bucket_errors() {
    let (store, enc) = setup();
    let n = 17;
    let t = tdoc(&vec![4; n], &vec![nb(0, 0, 0, 0); n], &(0..n).collect::<Vec<_>>());
    let mut g = Graph::new(&store);
    assert!(enc.encode(&mut g, &t, &Array::zeros(&[n, 8])).is_err());
    let t = tdoc(&[4], &[nb(1001, 0, 0, 0)], &[0]);
    assert!(enc.encode(&mut g, &t, &Array::zeros(&[1, 8])).is_err());
}

#[test]
fn equivariant_without_positions() {
    let (mut store, enc) = setup();
    store.value_mut(enc.positions).data_mut().iter_mut().for_each(|v| *v = 0.0);
    let boxes = [nb(1, 2, 3, 4), nb(100, 200, 50, 60), nb(700, 10, 20, 30)];
    let vis = features(3, 9);
    let fwd = tdoc(&[4, 5, 6], &boxes, &[0, 1, 2]);
    let perm = [2, 0, 1];
    let swapped = tdoc(
        &perm.map(|i| fwd.token_ids[i]),
        &perm.map(|i| boxes[i]),
        &[0, 1, 2],
    );
    let vis_rows: Vec<Vec<f64>> = perm.iter().map(|&i| vis.row(i).to_vec()).collect();
    let vis_p = Array::from_rows(&vis_rows).unwrap();
    let mut g = Graph::new(&store);
    let a = enc.encode(&mut g, &fwd, &vis).unwrap();
    let b = enc.encode(&mut g, &swapped, &vis_p).unwrap();
    for (r, &src) in perm.iter().enumerate() {
        for c in 0..8 {
            assert!((g.value(b).get(r, c) - g.value(a).get(src, c)).abs() < 1e-12);
        }
    }
}

#[test]
fn every_coordinate_table_gets_gradient() {
    let (mut store, enc) = setup();
    let t = tdoc(&[4, 5], &[nb(1, 2, 3, 4), nb(5, 6, 7, 8)], &[0, 1]);
    let mut g = Graph::new(&store);
    let h = enc.encode(&mut g, &t, &features(2, 4)).unwrap();
    let sq = g.mul(h, h).unwrap();
    let loss = g.sum(sq);
    let grads = g.backward(loss);
    drop(g);
    store.accumulate(&grads);
    for id in enc.coords {
        assert!(store.get(id).grad.sum_squares() > 0.0, "{}", store.get(id).name);
    }
}

#[test]
fn encoder_passes_grad_check() {
    let (mut store, enc) = setup();
    let t = tdoc(&[4, 5, 6], &[nb(1, 2, 3, 4), nb(5, 6, 7, 8), nb(9, 9, 9, 9)], &[0, 1, 2]);
    let vis = features(3, 5);
    let target = features(3, 6);
    let report = grad_check(
        &mut store,
        |g| {
            let h = enc.encode(g, &t, &vis)?;
            let w = g.constant(target.clone());
            let m = g.mul(h, w)?;
            Ok::<_, Error>(g.sum(m))
        },
        1e-5,
        11,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}
