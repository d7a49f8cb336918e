use sfpca::predict::{CurveSet, PpcBundle, Trajectory};
use sfpca::psis::{LooReport, KHAT_BAD};
use sfpca::svg::{Plot, Series};

pub fn khat(loo: &LooReport) -> Plot {
    let x: Vec<f64> = (1..=loo.khat.len()).map(|i| i as f64).collect();
    Plot::new("Pareto k diagnostic", "unit", "k-hat")
        .with(Series::line(x, loo.khat.clone(), "black").markers())
        .hline(KHAT_BAD, "red")
}

pub fn ppc(bundle: &PpcBundle) -> Plot {
    let mut plot = Plot::new("Posterior predictive check", "standardized value", "density");
    for r in &bundle.replicates {
        plot = plot.with(Series::line(bundle.grid.clone(), r.clone(), "steelblue").thin(0.6, 0.3));
    }
    plot.with(Series::line(bundle.grid.clone(), bundle.observed.clone(), "black").thin(2.0, 1.0))
}

pub fn mean_curve(curves: &CurveSet) -> Plot {
    let m = &curves.mean;
    Plot::new("Population mean curve", "time", "value")
        .with(Series::line(curves.time.clone(), m.lower.clone(), "gray").dashed())
        .with(Series::line(curves.time.clone(), m.upper.clone(), "gray").dashed())
        .with(Series::line(curves.time.clone(), m.mean.clone(), "black").thin(2.0, 1.0))
}

/// Mean curve with the component added and subtracted at one score SD.
pub fn component(curves: &CurveSet, j: usize) -> Plot {
    let c = &curves.components[j];
    Plot::new(&format!("PC {} (+/- 1 SD of scores)", j + 1), "time", "value")
        .with(Series::line(curves.time.clone(), curves.mean.mean.clone(), "black").thin(2.0, 1.0))
        .with(Series::line(curves.time.clone(), c.plus_sd.clone(), "darkorange"))
        .with(Series::line(curves.time.clone(), c.minus_sd.clone(), "royalblue"))
}

pub fn trajectory(t: &Trajectory) -> Plot {
    Plot::new(&format!("Subject {}", t.subject), "time", "value")
        .with(Series::line(t.time.clone(), t.band.lower.clone(), "red").dashed())
        .with(Series::line(t.time.clone(), t.band.upper.clone(), "red").dashed())
        .with(Series::line(t.time.clone(), t.band.median.clone(), "red"))
        .with(Series::line(t.observed_time.clone(), t.observed_value.clone(), "black").markers())
}
