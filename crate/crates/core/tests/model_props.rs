//! Model-level contracts: end-to-end gradients, invariances, encoder and
//! coupling semantics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use subformer::autodiff::{finite_difference_check, AutodiffError, BoundParams, Tape, Tensor};
use subformer::corpus::{load_corpus, AtomVocab, TaskType};
use subformer::graph::Graph;
use subformer::model::{Aggregation, ForwardOptions, ModelConfig, MpPe, Prepared, SubFormer};
use subformer::smiles::parse_smiles;
use subformer::spectral::{PeKind, PeMerge};

fn tiny(seed_tasks: usize) -> ModelConfig {
    let mut c = ModelConfig::zinc();
    c.mp_hidden = 6;
    c.pe_emb_dim = 3;
    c.pe.dim = 3;
    c.transformer_hidden = 8;
    c.ffn_hidden = 10;
    c.heads = 2;
    c.transformer_layers = 2;
    c.transformer_dropout = 0.0;
    c.readout_hidden = Some(5 + seed_tasks);
    c
}

fn vocab() -> AtomVocab {
    AtomVocab::from_labels(vec![6, 7, 8, 9, 16])
}

fn fixture(name: &str) -> String {
    format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))
}

/// Central differences over every parameter of the model on one molecule.
fn full_model_gradcheck(config: ModelConfig, smiles: &str) -> f64 {
    let model = SubFormer::new(config, 2, TaskType::Regression, vocab(), 11).unwrap();
    let item = model.prepare("m", &parse_smiles(smiles).unwrap(), &[None, None]).unwrap();
    assert_eq!(item.num_atoms, 6);
    let inputs: Vec<_> = model
        .params
        .ids()
        .map(|id| {
            let p = model.params.get(id);
            (p.values.clone(), p.shape.clone())
        })
        .collect();
    let weights = [0.7, -1.3];
    let result = finite_difference_check(&inputs, 1e-6, |t: &mut Tape, leaves: &[Tensor]| {
        let p = BoundParams::from_tensors(leaves.to_vec());
        let out = model
            .forward(t, &p, &[&item], None, ForwardOptions::eval())
            .map_err(|e| AutodiffError::Invalid(e.to_string()))?;
        let w = t.constant(weights.to_vec(), &[1, 2])?;
        let y = t.mul(out.predictions, w)?;
        Ok(t.sum_all(y))
    })
    .unwrap();
    result.max_rel_error()
}

#[test]
fn end_to_end_gradients_concat_pe() {
    let err = full_model_gradcheck(tiny(2), "CC1CCC1O");
    assert!(err < 1e-4, "max rel error {err}");
}

#[test]
fn end_to_end_gradients_sum_pe_with_virtual_node() {
    let mut c = tiny(2);
    c.pe.kinds = vec![PeKind::Deg, PeKind::Lpe, PeKind::Spde];
    c.pe.merge = PeMerge::Sum;
    c.aggregation = Aggregation::Mean;
    c.mp_pe = MpPe::Lpe;
    c.virtual_node = true;
    c.dual_readout = false;
    let err = full_model_gradcheck(c, "OC(=O)C(N)C");
    assert!(err < 1e-4, "max rel error {err}");
}

#[test]
fn relabeling_nodes_keeps_prediction_with_degree_pe() {
    let corpus = load_corpus(fixture("zinc_128.jsonl")).unwrap();
    let mut c = tiny(1);
    c.pe.kinds = vec![PeKind::Deg];
    c.padding_dim = None;
    for seed in 0..5u64 {
        let model = SubFormer::new(c.clone(), 1, TaskType::Regression, corpus.vocab.clone(), seed).unwrap();
        let rec = &corpus.records[seed as usize * 7];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rec.graph.num_nodes();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let a = model.prepare("a", &rec.graph, &rec.targets).unwrap();
        let b = model.prepare("b", &rec.graph.permute(&perm), &rec.targets).unwrap();
        let pa = model.predict(&[&a]).unwrap()[0][0];
        let pb = model.predict(&[&b]).unwrap()[0][0];
        assert!((pa - pb).abs() < 1e-6, "seed {seed}: {pa} vs {pb}");
    }
}

fn run_encoder(model: &SubFormer, rows: Vec<f64>, shape: [usize; 3], valid: &[usize], record: bool) -> (Vec<f64>, Vec<f64>, Vec<subformer::model::AttentionRecord>) {
    let mut t = Tape::new();
    let p = model.params.bind_frozen(&mut t);
    let x = t.constant(rows, &shape).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let opts = ForwardOptions { training: false, seed: 0, record_attention: record };
    let out = model.transformer_encoder(&mut t, &p, x, valid, &opts, &mut rng).unwrap();
    let last = *out.snapshots.last().unwrap();
    (t.value(x).to_vec(), t.value(last).to_vec(), out.attention)
}

#[test]
fn zero_layer_encoder_is_identity() {
    let mut c = tiny(1);
    c.transformer_layers = 0;
    let model = SubFormer::new(c, 1, TaskType::Regression, vocab(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rows: Vec<f64> = (0..2 * 4 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (input, output, att) = run_encoder(&model, rows, [2, 4, 8], &[4, 2], true);
    assert_eq!(input, output);
    assert!(att.is_empty());
}

#[test]
fn identical_tokens_attend_uniformly() {
    let model = SubFormer::new(tiny(1), 1, TaskType::Regression, vocab(), 1).unwrap();
    let token: Vec<f64> = (0..8).map(|i| 0.1 * i as f64 - 0.3).collect();
    let rows: Vec<f64> = token.iter().cycle().take(5 * 8).copied().collect();
    let (_, _, att) = run_encoder(&model, rows, [1, 5, 8], &[5], true);
    // first layer sees identical tokens exactly
    for rec in att.iter().filter(|r| r.layer == 0) {
        for row in &rec.weights {
            for &w in row {
                assert!((w - 0.2).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn attention_rows_are_stochastic_and_padding_is_ignored() {
    let model = SubFormer::new(tiny(1), 1, TaskType::Regression, vocab(), 2).unwrap();
    let mols = ["CCO", "c1ccccc1CC(C)(C)C", "C1CC2CCCCC2CC1"];
    let items: Vec<Prepared> = mols.iter().map(|s| model.prepare(s, &parse_smiles(s).unwrap(), &[None]).unwrap()).collect();
    let refs: Vec<&Prepared> = items.iter().collect();
    let mut t = Tape::new();
    let p = model.params.bind_frozen(&mut t);
    let opts = ForwardOptions { training: false, seed: 0, record_attention: true };
    let out = model.forward(&mut t, &p, &refs, None, opts).unwrap();
    assert_eq!(out.attention.len(), 2 * 2 * 3);
    for rec in &out.attention {
        assert_eq!(rec.valid, items[rec.item].num_clusters() + 1);
        for (i, row) in rec.weights.iter().enumerate() {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-5, "row {i} sums to {s}");
            assert!(row[rec.valid..].iter().all(|&w| w == 0.0));
        }
    }
    // padded positions neither receive gradient from real outputs
    let mut t = Tape::new();
    let p = model.params.bind_frozen(&mut t);
    let x = t.param(vec![0.3; 3 * 8 * 5].iter().enumerate().map(|(i, v)| v * ((i % 7) as f64 - 3.0)).collect(), &[3, 5, 8]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let enc = model.transformer_encoder(&mut t, &p, x, &[5, 2, 3], &ForwardOptions::eval(), &mut rng).unwrap();
    let last = *enc.snapshots.last().unwrap();
    let rows: Vec<Option<usize>> = [(0, 0..5), (1, 0..2), (2, 0..3)]
        .into_iter()
        .flat_map(|(b, r)| r.map(move |i| Some(b * 5 + i)))
        .collect();
    let flat = t.reshape(last, &[15, 8]).unwrap();
    let real = t.gather_rows(flat, &rows).unwrap();
    let loss = t.sum_all(real);
    let g = t.backward(loss).unwrap();
    let gx = g.get(x).unwrap();
    for (b, v) in [(1usize, 2usize), (2, 3)] {
        for pos in v..5 {
            assert!(gx[(b * 5 + pos) * 8..(b * 5 + pos + 1) * 8].iter().all(|&d| d == 0.0));
        }
    }
}

#[test]
fn x_out_is_the_row_sum_of_final_atom_features() {
    let model = SubFormer::new(tiny(1), 1, TaskType::Regression, vocab(), 5).unwrap();
    let item = model.prepare("m", &parse_smiles("CCO").unwrap(), &[None]).unwrap();
    let mut t = Tape::new();
    let p = model.params.bind_frozen(&mut t);
    let out = model.forward(&mut t, &p, &[&item], None, ForwardOptions::eval()).unwrap();
    // trace: embed, then mp_layers of GINE + coupling by hand
    let mut x = model.embed_atoms(&mut t, &p, &[&item]).unwrap();
    let mut z = model.embed_clusters(&mut t, &p, &item).unwrap();
    for l in 0..model.config().mp_layers {
        let x2 = model.gine_layer(&mut t, &p, l, &item, x).unwrap();
        (x, z) = model.coupling_block(&mut t, &p, l, &item, x2, z).unwrap();
    }
    assert_eq!(t.value(x), t.value(out.x_final));
    let d = model.config().mp_hidden;
    let xs = t.value(x);
    for j in 0..d {
        let sum: f64 = (0..3).map(|i| xs[i * d + j]).sum();
        assert!((sum - t.value(out.x_out)[j]).abs() < 1e-12);
    }
}

#[test]
fn gine_is_permutation_equivariant() {
    let model = SubFormer::new(tiny(1), 1, TaskType::Regression, vocab(), 8).unwrap();
    let g = parse_smiles("CC(=O)Nc1ccccc1").unwrap();
    let n = g.num_nodes();
    let perm: Vec<usize> = (0..n).map(|i| (i * 3 + 1) % n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let feats: Vec<f64> = (0..n * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    // node i of g becomes node perm[i] of the permuted graph
    let mut permuted = vec![0.0; n * 6];
    for i in 0..n {
        permuted[perm[i] * 6..perm[i] * 6 + 6].copy_from_slice(&feats[i * 6..i * 6 + 6]);
    }
    let a = model.prepare("a", &g, &[None]).unwrap();
    let b = model.prepare("b", &g.permute(&perm), &[None]).unwrap();
    let mut t = Tape::new();
    let p = model.params.bind_frozen(&mut t);
    let xa = t.constant(feats, &[n, 6]).unwrap();
    let xb = t.constant(permuted, &[n, 6]).unwrap();
    let ya = model.gine_layer(&mut t, &p, 0, &a, xa).unwrap();
    let yb = model.gine_layer(&mut t, &p, 0, &b, xb).unwrap();
    for i in 0..n {
        for k in 0..6 {
            assert!((t.value(ya)[i * 6 + k] - t.value(yb)[perm[i] * 6 + k]).abs() < 1e-6);
        }
    }
}

#[test]
fn gine_with_zero_second_layer_outputs_zero() {
    let mut model = SubFormer::new(tiny(1), 1, TaskType::Regression, vocab(), 8).unwrap();
    for name in ["mp.0.mlp2.weight", "mp.0.mlp2.bias"] {
        let id = model.params.id(name).unwrap();
        model.params.values_mut(id).iter_mut().for_each(|v| *v = 0.0);
    }
    let item = model.prepare("m", &Graph::new(vec![6], vec![]).unwrap(), &[None]).unwrap();
    let mut t = Tape::new();
    let p = model.params.bind_frozen(&mut t);
    let x = t.constant(vec![0.5; 6], &[1, 6]).unwrap();
    let y = model.gine_layer(&mut t, &p, 0, &item, x).unwrap();
    assert!(t.value(y).iter().all(|&v| v == 0.0));
}

#[test]
fn eval_forward_is_deterministic_and_training_dropout_is_seeded() {
    let mut c = tiny(1);
    c.transformer_dropout = 0.3;
    c.mp_dropout = 0.2;
    let model = SubFormer::new(c, 1, TaskType::Regression, vocab(), 3).unwrap();
    let item = model.prepare("m", &parse_smiles("CC1CCC1O").unwrap(), &[None]).unwrap();
    assert_eq!(model.predict(&[&item]).unwrap(), model.predict(&[&item]).unwrap());
    let train = |seed| {
        let mut t = Tape::new();
        let p = model.params.bind_frozen(&mut t);
        let opts = ForwardOptions { training: true, seed, record_attention: false };
        let out = model.forward(&mut t, &p, &[&item], None, opts).unwrap();
        t.value(out.predictions).to_vec()
    };
    assert_eq!(train(1), train(1));
    assert_ne!(train(1), train(2));
}
