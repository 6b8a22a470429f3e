use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::process::{Command, Stdio};

use acc_core::clock::Timestamp;
use acc_core::gateway::TelemetryPoint;
use acc_core::store::{downsample_points, points_from_csv, points_to_csv, Store, StoreError, StoreOptions};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const T0: Timestamp = 1_735_689_600;
const CRASH_DIR_VAR: &str = "ACC_STORE_CRASH_DIR";

/// Deterministic series: points every 30 s with random register increments
/// and an occasional gap.
fn series(house: &str, n: usize, seed: u64) -> Vec<TelemetryPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut ts, mut east, mut eait) = (T0, 10_000u64, 500u64);
    (0..n)
        .map(|i| {
            ts += if rng.random_bool(0.05) {
                30 * rng.random_range(2..20)
            } else {
                30
            };
            east += rng.random_range(0..40);
            eait += rng.random_range(0..15);
            TelemetryPoint {
                house_id: house.into(),
                ts,
                seq: i as u64 + 1,
                east_wh: east,
                eait_wh: eait,
                sinsts_va: rng.random_range(0..6000),
                sinsti_va: rng.random_range(0..3000),
                tariff: if rng.random_bool(0.3) { "HC".into() } else { "HP".into() },
            }
        })
        .collect()
}

#[test]
fn query_matches_linear_scan() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let points = series("h1", 10_000, 1);
    for p in &points {
        store.append(p.clone()).unwrap();
    }
    let last = points.last().unwrap().ts;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let a = rng.random_range(T0 - 100..last + 100);
        let b = rng.random_range(a..last + 200);
        let scan: Vec<_> = points.iter().filter(|p| p.ts >= a && p.ts < b).cloned().collect();
        assert_eq!(store.query("h1", a, b).unwrap(), scan, "window [{a}, {b})");
    }
    assert_eq!(store.len("h1"), 10_000);
    assert_eq!(store.last("h1").unwrap().as_ref(), points.last());
    assert_eq!(store.tail("h1", 3).unwrap(), points[points.len() - 3..].to_vec());
}

#[test]
fn reopen_restores_every_segment() {
    let dir = tempfile::tempdir().unwrap();
    let points = series("h2", 6_000, 3);
    {
        let store = Store::open(dir.path()).unwrap();
        for p in &points {
            store.append(p.clone()).unwrap();
        }
    }
    let days = std::fs::read_dir(dir.path().join("h2")).unwrap().count();
    assert!(days >= 2, "series should span several day segments");
    let store = Store::open(dir.path()).unwrap();
    assert_eq!(store.query_all("h2").unwrap(), points);
}

#[test]
fn out_of_order_and_rollback_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let mut points = series("h1", 3, 4);
    for p in &points {
        store.append(p.clone()).unwrap();
    }
    let mut late = points[0].clone();
    late.ts -= 1;
    assert!(matches!(store.append(late), Err(StoreError::OutOfOrder { .. })));
    let mut back = points[2].clone();
    back.ts += 30;
    back.east_wh -= 1;
    assert!(matches!(
        store.append(back),
        Err(StoreError::MonotonicityViolation { .. })
    ));
    // same timestamp replaces
    points[2].sinsts_va += 1;
    store.append(points[2].clone()).unwrap();
    assert_eq!(store.query_all("h1").unwrap(), points);
}

#[test]
fn downsampling_conserves_register_deltas() {
    let points = series("h1", 5_000, 5);
    let first = points.first().unwrap();
    let last = points.last().unwrap();
    for bucket in [300, 900, 1800, 3600] {
        let buckets = downsample_points(&points, first.ts, last.ts + 1, bucket);
        let consumed: u64 = buckets.iter().map(|b| b.consumed_wh).sum();
        let injected: u64 = buckets.iter().map(|b| b.injected_wh).sum();
        assert_eq!(consumed, last.east_wh - first.east_wh, "bucket {bucket}");
        assert_eq!(injected, last.eait_wh - first.eait_wh, "bucket {bucket}");
        let samples: u64 = buckets.iter().map(|b| b.sample_count).sum();
        assert_eq!(samples, points.len() as u64);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn half_hour_buckets_aggregate_to_hours(seed in any::<u64>(), n in 1usize..800, off in 0i64..86_400, len in 1i64..200_000) {
        let points = series("h1", n, seed);
        let (t0, t1) = (T0 + off, T0 + off + len);
        let fine = downsample_points(&points, t0, t1, 900);
        let coarse = downsample_points(&points, t0, t1, 1800);
        let hourly = downsample_points(&points, t0, t1, 3600);
        let sum = |bs: &[acc_core::store::Bucket], start: i64| -> (u64, u64) {
            bs.iter()
                .filter(|b| b.start >= start && b.start < start + 3600)
                .fold((0, 0), |(c, i), b| (c + b.consumed_wh, i + b.injected_wh))
        };
        for h in &hourly {
            let hf = sum(&fine, h.start);
            let hc = sum(&coarse, h.start);
            // edge hours may be only partly covered by the finer grids
            if fine.first().is_some_and(|b| b.start <= h.start) && fine.last().is_some_and(|b| b.start + 900 >= h.start + 3600) {
                prop_assert_eq!(hf, (h.consumed_wh, h.injected_wh));
            }
            if coarse.first().is_some_and(|b| b.start <= h.start) && coarse.last().is_some_and(|b| b.start + 1800 >= h.start + 3600) {
                prop_assert_eq!(hc, (h.consumed_wh, h.injected_wh));
            }
        }
    }

    #[test]
    fn csv_round_trip(seed in any::<u64>(), n in 0usize..200, tariff in "[ -~]{0,12}") {
        let mut points = series("h-1_x", n, seed);
        for p in points.iter_mut().step_by(3) {
            p.tariff = tariff.clone();
        }
        let csv = points_to_csv(&points).unwrap();
        prop_assert_eq!(points_from_csv(&csv).unwrap(), points);
    }
}

#[test]
fn csv_schema_errors_carry_the_line() {
    let ok = points_to_csv(&series("h1", 3, 6)).unwrap();
    let mut text = String::from_utf8(ok).unwrap();
    text.push_str("h1,notanumber,4,1,1,1,1,HP\n");
    match points_from_csv(text.as_bytes()) {
        Err(StoreError::CsvSchemaError { line, .. }) => assert_eq!(line, 5),
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        points_from_csv(b"house,ts\nh1,1\n"),
        Err(StoreError::CsvSchemaError { line: 1, .. })
    ));
    assert!(points_from_csv(b"").is_err());
}

#[test]
fn export_import_is_identity() {
    let src_dir = tempfile::tempdir().unwrap();
    let src = Store::open(src_dir.path()).unwrap();
    for (i, h) in ["h1", "h2", "h3"].iter().enumerate() {
        for p in series(h, 2_000, 10 + i as u64) {
            src.append(p).unwrap();
        }
    }
    let csv = src.export_csv(None, i64::MIN / 2, i64::MAX / 2).unwrap();
    let dst_dir = tempfile::tempdir().unwrap();
    let dst = Store::open(dst_dir.path()).unwrap();
    assert_eq!(dst.import_csv(&csv).unwrap(), 6_000);
    assert_eq!(dst.houses(), src.houses());
    for h in src.houses() {
        assert_eq!(dst.query_all(&h).unwrap(), src.query_all(&h).unwrap());
    }
    let one = src.export_csv(Some("h2"), T0, T0 + 86_400).unwrap();
    let back = points_from_csv(&one).unwrap();
    assert!(back
        .iter()
        .all(|p| p.house_id == "h2" && p.ts >= T0 && p.ts < T0 + 86_400));
    assert_eq!(back, src.query("h2", T0, T0 + 86_400).unwrap());
}

#[test]
fn torn_tail_is_truncated_on_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let points = series("h1", 50, 7);
    {
        let store = Store::open(dir.path()).unwrap();
        for p in &points {
            store.append(p.clone()).unwrap();
        }
    }
    let seg = std::fs::read_dir(dir.path().join("h1"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .max()
        .unwrap();
    let clean_len = std::fs::metadata(&seg).unwrap().len();
    OpenOptions::new()
        .append(true)
        .open(&seg)
        .unwrap()
        .write_all(b"{\"house\":\"h1\",\"ts\":17")
        .unwrap();
    let store = Store::open(dir.path()).unwrap();
    assert_eq!(store.query_all("h1").unwrap(), points);
    assert_eq!(std::fs::metadata(&seg).unwrap().len(), clean_len);
    let mut next = points.last().unwrap().clone();
    next.ts += 30;
    next.seq += 1;
    store.append(next.clone()).unwrap();
    drop(store);
    let store = Store::open(dir.path()).unwrap();
    assert_eq!(store.last("h1").unwrap(), Some(next));
}

#[test]
fn corrupt_line_inside_a_segment_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    {
        let store = Store::open(dir.path()).unwrap();
        for p in series("h1", 5, 8) {
            store.append(p).unwrap();
        }
    }
    let seg = std::fs::read_dir(dir.path().join("h1"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let text = std::fs::read_to_string(&seg).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[2] = "garbage";
    std::fs::write(&seg, lines.join("\n") + "\n").unwrap();
    assert!(matches!(
        Store::open(dir.path()),
        Err(StoreError::Corrupt { line: 3, .. })
    ));
}

const CRASH_POINTS: usize = 20_000;

/// Child side of the crash harness: appends the fixed series and
/// acknowledges each point on stdout until killed.
#[test]
fn crash_child() {
    let Ok(dir) = std::env::var(CRASH_DIR_VAR) else {
        return;
    };
    let store = Store::open_with(&dir, StoreOptions::default()).unwrap();
    let start = store.len("h1");
    let out = std::io::stdout();
    for p in series("h1", CRASH_POINTS, 99).into_iter().skip(start) {
        let seq = p.seq;
        store.append(p).unwrap();
        let mut o = out.lock();
        writeln!(o, "acked {seq}").unwrap();
        o.flush().unwrap();
    }
}

#[test]
fn killed_writer_leaves_a_consistent_prefix() {
    let exe = std::env::current_exe().unwrap();
    let expected = series("h1", CRASH_POINTS, 99);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let dir = tempfile::tempdir().unwrap();
    let mut acked_total = 0u64;
    for round in 0..20 {
        let mut child = Command::new(&exe)
            .args(["crash_child", "--exact", "--nocapture", "--test-threads=1"])
            .env(CRASH_DIR_VAR, dir.path())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let kill_after = rng.random_range(1..400u64);
        let mut reader = BufReader::new(child.stdout.take().unwrap());
        let mut line = String::new();
        let mut seen = 0;
        while seen < kill_after {
            line.clear();
            if reader.read_line(&mut line).unwrap() == 0 {
                break;
            }
            if let Some(seq) = line.trim().strip_prefix("acked ") {
                acked_total = seq.parse().unwrap();
                seen += 1;
            }
        }
        child.kill().unwrap();
        child.wait().unwrap();

        let store = Store::open(dir.path()).unwrap();
        let got = store.query_all("h1").unwrap();
        assert!(
            got.len() as u64 >= acked_total,
            "round {round}: lost acknowledged points"
        );
        assert_eq!(got, expected[..got.len()].to_vec(), "round {round}: not a prefix");
    }
    assert!(acked_total > 20);
}
