use std::collections::BTreeMap;
use std::io::Write;

use acc_core::analytics::{
    corrected_indexes, instant_rates, period_rates, thirty_min_rates, DistributionKey, MonthlyAllocation, Rate,
    RateReport, RateScale,
};
use acc_core::clock::Timestamp;
use acc_core::service::ServiceConfig;
use acc_core::sim::DayPlusOneReport;
use acc_core::store::{group_by_house, points_from_csv, Store};

use crate::settings::{read_file, to_json, write_file};
use crate::{AllocateArgs, CliError, ExportArgs, RatesArgs};

fn rate_text(r: Rate) -> String {
    match r.value() {
        Some(v) => format!("{v}"),
        None => "n/a".into(),
    }
}

pub fn compute_rates(config: &ServiceConfig, args: &RatesArgs) -> Result<RateReport, CliError> {
    let points = points_from_csv(&read_file(&args.csv)?)?;
    let (Some(first), Some(last)) = (points.iter().map(|p| p.ts).min(), points.iter().map(|p| p.ts).max()) else {
        return Err(CliError::Config(format!("{} holds no telemetry", args.csv.display())));
    };
    let series = group_by_house(points);
    let step = args.step.unwrap_or(config.rate_step_s);
    let now: Timestamp = args.now.unwrap_or(last);
    Ok(match args.scale {
        RateScale::DisplayPeriod => {
            let t0 = args.from.unwrap_or(first);
            let t1 = args.to.unwrap_or(last + 1);
            period_rates(&series, t0, t1, step)?
        }
        RateScale::ThirtyMin => thirty_min_rates(&series, now, step)?,
        RateScale::Instantaneous => {
            let latest: BTreeMap<String, Vec<_>> = series
                .into_iter()
                .map(|(h, pts)| {
                    let upto = pts.partition_point(|p| p.ts <= now);
                    (h, pts[upto.saturating_sub(2)..upto].to_vec())
                })
                .collect();
            let max_age = i64::from(config.stale_factor) * i64::from(config.refresh_period_s);
            instant_rates(&latest, now, max_age)
        }
    })
}

pub fn rates(config: ServiceConfig, args: RatesArgs) -> Result<(), CliError> {
    let r = compute_rates(&config, &args)?;
    if args.json {
        out!("{}", to_json(&r));
        return Ok(());
    }
    let scale = match r.scale {
        RateScale::Instantaneous => "instant",
        RateScale::ThirtyMin => "30min",
        RateScale::DisplayPeriod => "period",
    };
    out!("scale             {scale}");
    out!("window            [{}, {})", r.window[0], r.window[1]);
    out!("self_consumption  {}", rate_text(r.self_consumption));
    out!("self_sufficiency  {}", rate_text(r.self_sufficiency));
    out!("samples           {}", r.samples_used);
    if !r.excluded.is_empty() {
        out!("excluded          {}", r.excluded.join(","));
    }
    Ok(())
}

fn load_reports(dir: &std::path::Path) -> Result<BTreeMap<String, Vec<DayPlusOneReport>>, CliError> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(CliError::io(dir))? {
        let path = entry.map_err(CliError::io(dir))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let Some(house) = path.file_stem().and_then(|s| s.to_str()).map(str::to_string) else {
            continue;
        };
        let reports: Vec<DayPlusOneReport> = serde_json::from_slice(&read_file(&path)?)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        out.insert(house, reports);
    }
    if out.is_empty() {
        return Err(CliError::Config(format!(
            "no <house>.json reports in {}",
            dir.display()
        )));
    }
    Ok(out)
}

fn print_allocation(a: &MonthlyAllocation) {
    let first = a.days.first().map(|d| d.to_string()).unwrap_or_default();
    let last = a.days.last().map(|d| d.to_string()).unwrap_or_default();
    out!("days {first}..{last} ({} slots)", a.slots);
    out!(
        "production {} Wh, self-consumed {} Wh, surplus {} Wh",
        a.production_wh,
        a.self_consumed_wh,
        a.surplus_wh
    );
    out!(
        "{:<12} {:>14} {:>14} {:>14}",
        "consumer",
        "consumption_wh",
        "allocated_wh",
        "residual_wh"
    );
    for (h, c) in &a.consumers {
        out!(
            "{h:<12} {:>14} {:>14} {:>14}",
            c.consumption_wh,
            c.self_consumed_wh,
            c.residual_wh
        );
    }
    out!(
        "{:<12} {:>14} {:>14} {:>14}",
        "producer",
        "injected_wh",
        "shared_wh",
        "surplus_wh"
    );
    for (h, p) in &a.producers {
        out!("{h:<12} {:>14} {:>14} {:>14}", p.injected_wh, p.shared_wh, p.surplus_wh);
    }
}

pub fn allocate(args: AllocateArgs) -> Result<(), CliError> {
    let key: DistributionKey = match &args.key_file {
        Some(path) => serde_json::from_slice(&read_file(path)?)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?,
        None => args.key.clone(),
    };
    let reports = load_reports(&args.reports)?;
    let a = corrected_indexes(&key, &reports)?;
    if args.json {
        out!("{}", to_json(&a));
    } else {
        print_allocation(&a);
    }
    Ok(())
}

pub fn export(config: ServiceConfig, args: ExportArgs) -> Result<(), CliError> {
    let dir = args.store.unwrap_or(config.store_dir);
    if !dir.is_dir() {
        return Err(CliError::Config(format!("no store at {}", dir.display())));
    }
    let store = Store::open(&dir)?;
    let csv = store.export_csv(
        args.house.as_deref(),
        args.from.unwrap_or(Timestamp::MIN),
        args.to.unwrap_or(Timestamp::MAX),
    )?;
    match args.out {
        Some(path) => write_file(&path, &csv),
        None => std::io::stdout().write_all(&csv).map_err(CliError::io("stdout")),
    }
}
