use serialflow::evaluation::{compute_metrics, make_split, Role, SplitKind};
use serialflow::numerics::Tensor2;
use serialflow::synth_data::{generate_stack, SynthConfig};

fn nearest(points: &[[f64; 2]], q: [f64; 2]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (j, p) in points.iter().enumerate() {
        let d = (p[0] - q[0]).hypot(p[1] - q[1]);
        if d < best.0 {
            best = (d, j);
        }
    }
    best.1
}

#[test]
fn smooth_stacks_share_anatomy_across_sections() {
    let g = generate_stack(&SynthConfig {
        seed: 11,
        ..SynthConfig::default()
    })
    .unwrap();
    let secs = g.stack.sections();
    let mut agree = 0;
    let mut total = 0;
    for w in secs.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let (la, lb) = (a.labels.as_ref().unwrap(), b.labels.as_ref().unwrap());
        for (i, &c) in a.coords.iter().enumerate() {
            agree += (la[i] == lb[nearest(&b.coords, c)]) as usize;
            total += 1;
        }
    }
    let frac = agree as f64 / total as f64;
    println!("label agreement with planar-nearest spot on z+1: {frac:.4}");
    assert!(frac > 0.9, "{frac}");
}

#[test]
fn region_means_match_programs() {
    let cfg = SynthConfig {
        sections: 2,
        spots_per_section: 1600,
        genes: 10,
        emb_dim: 4,
        regions: 2,
        smoothness: 1.0,
        seed: 3,
        ..SynthConfig::default()
    };
    let g = generate_stack(&cfg).unwrap();
    let expect = g.programs.expected_counts();
    for r in 0..cfg.regions {
        let rows: Vec<&[f64]> = g
            .stack
            .sections()
            .iter()
            .flat_map(|s| {
                let c = s.counts.as_ref().unwrap();
                let l = s.labels.as_ref().unwrap();
                (0..s.len()).filter(move |&i| l[i] == r).map(move |i| c.row(i))
            })
            .collect();
        assert!(rows.len() >= 500, "region {r} has only {} spots", rows.len());
        for j in 0..cfg.genes {
            let m = rows.iter().map(|row| row[j]).sum::<f64>() / rows.len() as f64;
            let e = expect.get(r, j);
            assert!((m - e).abs() / e < 0.05, "region {r} gene {j}: {m} vs {e}");
        }
    }
}

fn centroid_accuracy(snr: f64) -> f64 {
    let cfg = SynthConfig {
        sections: 2,
        spots_per_section: 400,
        snr,
        seed: 21,
        ..SynthConfig::default()
    };
    let g = generate_stack(&cfg).unwrap();
    let (train, test) = (&g.stack.sections()[0], &g.stack.sections()[1]);
    let d = cfg.emb_dim;
    let mut cent = vec![vec![0.0; d]; cfg.regions];
    let mut n = vec![0usize; cfg.regions];
    let l = train.labels.as_ref().unwrap();
    for i in 0..train.len() {
        n[l[i]] += 1;
        for (c, v) in cent[l[i]].iter_mut().zip(train.embedding.row(i)) {
            *c += v;
        }
    }
    for (c, k) in cent.iter_mut().zip(&n) {
        c.iter_mut().for_each(|v| *v /= (*k).max(1) as f64);
    }
    let lt = test.labels.as_ref().unwrap();
    let mut hit = 0;
    for i in 0..test.len() {
        let e = test.embedding.row(i);
        let best = (0..cfg.regions)
            .filter(|&r| n[r] > 0)
            .min_by(|&a, &b| {
                let da: f64 = cent[a].iter().zip(e).map(|(x, y)| (x - y) * (x - y)).sum();
                let db: f64 = cent[b].iter().zip(e).map(|(x, y)| (x - y) * (x - y)).sum();
                da.total_cmp(&db)
            })
            .unwrap();
        hit += (best == lt[i]) as usize;
    }
    hit as f64 / test.len() as f64
}

#[test]
fn embedding_informativeness_grows_with_snr() {
    let acc: Vec<f64> = [0.0, 1.0, 4.0].iter().map(|&s| centroid_accuracy(s)).collect();
    println!("nearest-centroid accuracy at snr 0/1/4: {acc:?}");
    assert!(acc[0] < acc[1] && acc[1] < acc[2], "{acc:?}");
}

/// Ceiling for the benchmark stack: predicting each held-out spot by the
/// exact `E[log1p Y]` of its true region.
#[test]
fn nearest_region_oracle_ceiling() {
    for seed in 0..3 {
        let g = generate_stack(&SynthConfig {
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let split = make_split(g.stack.z_count(), SplitKind::EvenSlice, 0).unwrap();
        let table = g.programs.expected_log1p();
        let mut preds = Vec::new();
        let mut truths = Vec::new();
        for z in split.zs(Role::Test) {
            let s = g.stack.section(z).unwrap();
            let l = s.labels.as_ref().unwrap();
            preds.push(Tensor2::from_fn(s.len(), g.stack.genes(), |i, j| table.get(l[i], j)));
            truths.push(s.expression.clone().unwrap());
        }
        let p = Tensor2::vstack(&preds.iter().collect::<Vec<_>>()).unwrap();
        let t = Tensor2::vstack(&truths.iter().collect::<Vec<_>>()).unwrap();
        let m = compute_metrics(&p, &t).unwrap();
        println!(
            "seed {seed}: oracle pcc_gene {:.4} pcc_spot {:.4} mse {:.4}",
            m.pcc_gene_mean, m.pcc_spot_mean, m.mse
        );
        assert!(m.pcc_gene_mean >= 0.6 && m.pcc_spot_mean >= 0.5);
    }
}
