//! Fixed inputs shared by the benchmarks.

use red_core::estimator::{net_init, EstimatorParams, NetArch, NetPredictor};
use red_core::tomo::{forward_project, make_phantom, Ellipse, Image, PhantomSpec, ProjectionGeometry, Sinogram};
use red_core::ResidualSchedule;

pub const SIDE: usize = 64;
pub const ANGLES: usize = 96;
pub const BINS: usize = 96;

pub fn geometry() -> ProjectionGeometry {
    ProjectionGeometry::parallel(SIDE, ANGLES, BINS).expect("valid geometry")
}

pub fn phantom() -> Image {
    let spec = PhantomSpec {
        ellipses: vec![
            Ellipse::disk(0.0, 0.0, 0.7, 1.0),
            Ellipse::disk(0.25, -0.1, 0.2, 2.0),
            Ellipse::disk(-0.3, 0.2, 0.12, 3.0),
        ],
    };
    make_phantom(&spec, SIDE, SIDE).expect("valid phantom")
}

pub fn sinogram() -> Sinogram {
    forward_project(&phantom(), &geometry()).expect("matching geometry")
}

/// Max-scaled copy of [`sinogram`], the range the estimators see.
pub fn normalized() -> Sinogram {
    let mut s = sinogram();
    let max = s.max();
    s.values.iter_mut().for_each(|v| *v /= max);
    s
}

pub fn predictor() -> NetPredictor {
    let params: EstimatorParams<f32> = net_init(&NetArch::default(), 7).expect("valid arch");
    NetPredictor {
        params,
        sched: ResidualSchedule::new(500, red_core::ScheduleKind::Linear, 1.0).expect("valid schedule"),
    }
}
