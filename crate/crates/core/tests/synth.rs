use hdpgpc::io::{write_segments, Format};
use hdpgpc::synth::{synth_generate, synth_generate_full, SynthSpec};

fn bytes(spec: &SynthSpec) -> Vec<u8> {
    let mut buf = Vec::new();
    write_segments(&mut buf, &synth_generate(spec).unwrap(), Format::Csv).unwrap();
    buf
}

#[test]
fn same_seed_same_bytes() {
    let spec = SynthSpec {
        seed: 11,
        ..SynthSpec::default()
    };
    assert_eq!(bytes(&spec), bytes(&spec));
    assert_ne!(
        bytes(&spec),
        bytes(&SynthSpec {
            seed: 12,
            ..spec.clone()
        })
    );
}

#[test]
fn noiseless_unwarped_static_segments_equal_their_latent_mean() {
    let spec = SynthSpec {
        noise: 0.0,
        warp_strength: 0.0,
        drift: 0.0,
        seed: 3,
        ..SynthSpec::default()
    };
    let data = synth_generate_full(&spec).unwrap();
    for (n, seg) in data.segments.iter().enumerate() {
        assert_eq!(seg.y, data.latent[n]);
        let first = data.labels.iter().position(|l| *l == data.labels[n]).unwrap();
        assert_eq!(seg.y, data.segments[first].y);
    }
}

#[test]
fn default_suite_is_separable() {
    for seed in 0..10 {
        let spec = SynthSpec {
            seed,
            ..SynthSpec::default()
        };
        let data = synth_generate_full(&spec).unwrap();
        let q = spec.q;
        let mut means = vec![vec![0.0; q]; spec.k_true];
        let mut counts = vec![0usize; spec.k_true];
        for (seg, l) in data.segments.iter().zip(&data.labels) {
            counts[*l] += 1;
            for (m, y) in means[*l].iter_mut().zip(&seg.y) {
                *m += y;
            }
        }
        for (m, c) in means.iter_mut().zip(&counts) {
            assert!(*c > 0);
            m.iter_mut().for_each(|v| *v /= *c as f64);
        }
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let spread = (data
            .segments
            .iter()
            .zip(&data.labels)
            .map(|(s, l)| dist(&s.y, &means[*l]).powi(2))
            .sum::<f64>()
            / data.segments.len() as f64)
            .sqrt();
        for a in 0..spec.k_true {
            for b in a + 1..spec.k_true {
                let d = dist(&means[a], &means[b]);
                assert!(
                    d > 5.0 * spread,
                    "seed {seed}: clusters {a},{b} at {d} with spread {spread}"
                );
            }
        }
    }
}

#[test]
fn labels_and_times_are_consistent() {
    let spec = SynthSpec::default();
    let data = synth_generate_full(&spec).unwrap();
    assert_eq!(data.segments.len(), spec.n);
    for (seg, l) in data.segments.iter().zip(&data.labels) {
        assert_eq!(seg.len(), spec.q);
        assert_eq!(seg.label.as_deref(), Some(format!("c{l}").as_str()));
        seg.validate().unwrap();
    }
}
