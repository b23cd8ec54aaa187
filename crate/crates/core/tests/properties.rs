use proptest::prelude::*;

use mgvq::codec::{bits_per_index, pack_indices, payload_len, unpack_indices, StreamHeader};
use mgvq::mgq::{capacity_log2, nested_mask, quantize, split_groups, CodebookSet, TokenMap};
use mgvq::ndgrad::Tensor;
use mgvq::objectives::{total_loss, LossHooks, LossWeights};

/// Exhaustive nearest row by squared distance, lowest index on ties.
fn oracle(query: &[f64], table: &[f64], dim: usize) -> u32 {
    let mut best = (f64::INFINITY, 0);
    for (k, row) in table.chunks_exact(dim).enumerate() {
        let d: f64 = row.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, k);
        }
    }
    best.1 as u32
}

fn quant_case() -> impl Strategy<Value = (usize, usize, usize, usize, Vec<f64>, Vec<f64>)> {
    (1usize..5, 1usize..17, 1usize..5, 1usize..7).prop_flat_map(|(g, k, dim, sites)| {
        (
            Just(g),
            Just(k),
            Just(dim),
            Just(sites),
            prop::collection::vec(-2.0f64..2.0, sites * g * dim),
            prop::collection::vec(-2.0f64..2.0, g * k * dim),
        )
    })
}

fn token_map() -> impl Strategy<Value = (TokenMap, u32)> {
    (1usize..5, 1usize..5, 1usize..5, 1u32..3000).prop_flat_map(|(g, h, w, k)| {
        prop::collection::vec(prop::collection::vec(0..k, h * w), g).prop_map(move |indices| {
            (
                TokenMap {
                    grid_h: h,
                    grid_w: w,
                    indices,
                },
                k,
            )
        })
    })
}

proptest! {
    #[test]
    fn quantize_equals_exhaustive_search((g, k, dim, sites, z, tables) in quant_case()) {
        let cb = CodebookSet::from_tables(
            tables
                .chunks_exact(k * dim)
                .map(|t| Tensor::new(&[k, dim], t.to_vec()).unwrap())
                .collect(),
        )
        .unwrap();
        let zt = Tensor::new(&[1, sites, g * dim], z.clone()).unwrap();
        let q = quantize(&zt, &cb).unwrap();
        for gi in 0..g {
            for s in 0..sites {
                let query = &z[s * g * dim + gi * dim..][..dim];
                let want = oracle(query, &tables[gi * k * dim..(gi + 1) * k * dim], dim);
                prop_assert_eq!(q.tokens[0].indices[gi][s], want);
            }
        }
        // output rows are codebook rows
        for (s, row) in q.z_q.data().chunks_exact(g * dim).enumerate() {
            for gi in 0..g {
                let kk = q.tokens[0].indices[gi][s] as usize;
                let code = &tables[(gi * k + kk) * dim..][..dim];
                prop_assert_eq!(&row[gi * dim..(gi + 1) * dim], code);
            }
        }
    }

    #[test]
    fn pack_round_trip((tokens, k) in token_map()) {
        let payload = pack_indices(&tokens, k).unwrap();
        prop_assert_eq!(payload.len(), payload_len(tokens.groups(), tokens.grid_h, tokens.grid_w, k));
        prop_assert_eq!(
            payload.len(),
            (tokens.groups() * tokens.grid_h * tokens.grid_w * bits_per_index(k) as usize).div_ceil(8)
        );
        let header = StreamHeader {
            groups: tokens.groups() as u16,
            codebook_size: k,
            grid_h: tokens.grid_h as u16,
            grid_w: tokens.grid_w as u16,
            orig_h: 0,
            orig_w: 0,
        };
        prop_assert_eq!(StreamHeader::from_bytes(&header.to_bytes()).unwrap(), header);
        prop_assert_eq!(unpack_indices(&payload, &header).unwrap(), tokens);
    }

    #[test]
    fn bits_per_index_is_ceil_log2(k in 2u32..1_000_000) {
        let b = bits_per_index(k);
        prop_assert!(1u64 << b >= k as u64);
        prop_assert!(1u64 << (b - 1) < k as u64);
    }

    #[test]
    fn total_is_weighted_sum(
        w in prop::array::uniform6(0.0f64..5.0),
        a in prop::collection::vec(0.0f64..1.0, 12),
        b in prop::collection::vec(0.0f64..1.0, 12),
        z in prop::collection::vec(-1.0f64..1.0, 8),
        q in prop::collection::vec(-1.0f64..1.0, 8),
    ) {
        let weights = LossWeights {
            l2: w[0],
            charbonnier: w[1],
            commit: w[2],
            vq: w[3],
            gan: w[4],
            perceptual: w[5],
            eps: 1e-3,
        };
        let t = |v: &Vec<f64>, s: &[usize]| Tensor::<f64>::new(s, v.clone()).unwrap();
        let (total, br) = total_loss(
            &t(&a, &[2, 2, 3]),
            &t(&b, &[2, 2, 3]),
            &t(&z, &[2, 4]),
            &t(&q, &[2, 4]),
            &weights,
            &LossHooks::default(),
        )
        .unwrap();
        let recomputed = br.weighted_sum(&weights);
        let v = total.item().unwrap();
        prop_assert!((v - recomputed).abs() <= 1e-12 * recomputed.abs().max(1.0));
    }

    #[test]
    fn full_keep_is_identity(g in 1usize..6, dim in 1usize..4, v in prop::collection::vec(-3.0f32..3.0, 60)) {
        let c = g * dim;
        let sites = v.len() / c;
        prop_assume!(sites > 0);
        let z = Tensor::new(&[sites, c], v[..sites * c].to_vec()).unwrap();
        prop_assert!(nested_mask(&z, g, g).unwrap().bit_eq(&z));
        for keep in 1..g {
            let m = nested_mask(&z, keep, g).unwrap();
            for (row, orig) in m.data().chunks_exact(c).zip(z.data().chunks_exact(c)) {
                prop_assert_eq!(&row[..keep * dim], &orig[..keep * dim]);
                prop_assert!(row[keep * dim..].iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn split_then_concat_round_trips(g in 1usize..5, dim in 1usize..4, sites in 1usize..5) {
        let c = g * dim;
        let z = Tensor::<f32>::new(&[sites, c], (0..sites * c).map(|i| i as f32).collect()).unwrap();
        let parts = split_groups(&z, g).unwrap();
        prop_assert_eq!(parts.len(), g);
        prop_assert!(Tensor::concat_channels(&parts).unwrap().bit_eq(&z));
    }

    #[test]
    fn capacity_is_additive_in_groups(k in 1u64..1 << 20, g in 1u64..16) {
        let c = capacity_log2(k, g);
        prop_assert!((c - g as f64 * (k as f64).log2()).abs() < 1e-9);
    }
}
