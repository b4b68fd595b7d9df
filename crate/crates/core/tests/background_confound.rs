use ckfr_core::data::Dataset;
use ckfr_core::synth::{generate_tree_blobs, rgb_to_hue, SynthConfig};

// Mean colour of the pixels outside the object's box, binned to the nearest class hue.
fn background_bin(ds: &Dataset, i: usize, k: usize) -> usize {
    let (_, h, w) = ds.image_shape();
    let img = ds.image(i);
    let b = ds.boxes.as_ref().unwrap()[i][0];
    let mut sum = [0.0; 3];
    let mut n = 0.0;
    for y in 0..h {
        for x in 0..w {
            if x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1 {
                continue;
            }
            for (ch, s) in sum.iter_mut().enumerate() {
                *s += img[ch * h * w + y * w + x];
            }
            n += 1.0;
        }
    }
    let hue = rgb_to_hue(sum.map(|s| s / n));
    (hue * k as f64).round() as usize % k
}

// Plug-in estimate of I(bin; class) in nats from a joint histogram.
fn mutual_information(pairs: &[(usize, usize)], k: usize) -> f64 {
    let n = pairs.len() as f64;
    let mut joint = vec![vec![0.0; k]; k];
    for &(a, c) in pairs {
        joint[a][c] += 1.0;
    }
    let pa: Vec<f64> = joint.iter().map(|r| r.iter().sum::<f64>() / n).collect();
    let pc: Vec<f64> = (0..k).map(|c| joint.iter().map(|r| r[c]).sum::<f64>() / n).collect();
    let mut mi = 0.0;
    for a in 0..k {
        for c in 0..k {
            let p = joint[a][c] / n;
            if p > 0.0 {
                mi += p * (p / (pa[a] * pc[c])).ln();
            }
        }
    }
    mi
}

fn split_mi(ds: &Dataset, k: usize) -> f64 {
    let pairs: Vec<_> = (0..ds.len()).map(|i| (background_bin(ds, i, k), ds.labels[i])).collect();
    mutual_information(&pairs, k)
}

#[test]
fn full_confounding_makes_background_identify_the_class() {
    let cfg = SynthConfig {
        confound_prob: 1.0,
        image_size: 16,
        images_per_class: 200,
        ..Default::default()
    };
    let g = generate_tree_blobs(&cfg).unwrap();
    let k = cfg.class_count();
    let log_k = (k as f64).ln();
    let train = split_mi(&g.train, k);
    let val = split_mi(&g.val, k);
    assert!((train - log_k).abs() < 1e-9, "train MI {train} vs {log_k}");
    // finite-sample bias of the plug-in estimator is about (k-1)^2 / 2n
    assert!(val < 0.2, "val MI {val}");
}

#[test]
fn no_confounding_leaves_train_background_uninformative() {
    let cfg = SynthConfig {
        confound_prob: 0.0,
        image_size: 16,
        images_per_class: 200,
        ..Default::default()
    };
    let g = generate_tree_blobs(&cfg).unwrap();
    assert!(split_mi(&g.train, cfg.class_count()) < 0.1);
}
