//! Per-request-type service profiling.

mod histogram;

use std::collections::BTreeMap;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

pub use histogram::{bucket_bounds, bucket_index, nearest_rank, LatencyHistogram, GROWTH};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("negative duration {0}")]
    NegativeDuration(f64),
    #[error("unknown request type {0:?}")]
    UnknownRequestType(String),
    #[error("no successful samples for {0:?}")]
    NoSamples(String),
    #[error("quantile {0} outside (0, 1]")]
    InvalidQuantile(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestOutcome {
    Success,
    Failure,
}

/// Point-in-time profile of one request type. Latency statistics are absent
/// until the first successful response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestProfile {
    #[serde(rename = "type")]
    pub request_type: String,
    pub requests: u64,
    pub responses: u64,
    pub failures: u64,
    #[serde(skip)]
    pub in_flight: u64,
    pub mean: Option<f64>,
    pub p50: Option<f64>,
    pub p99: Option<f64>,
}

#[derive(Default)]
struct Profile {
    requests: u64,
    responses: u64,
    failures: u64,
    in_flight: u64,
    sum: f64,
    hist: LatencyHistogram,
}

impl Profile {
    fn finish(&mut self, duration: f64, outcome: RequestOutcome) {
        self.in_flight -= 1;
        match outcome {
            RequestOutcome::Success => {
                self.responses += 1;
                self.sum += duration;
                self.hist.record(duration);
            }
            RequestOutcome::Failure => self.failures += 1,
        }
    }

    fn snapshot(&self, name: &str) -> RequestProfile {
        let has = self.responses > 0;
        RequestProfile {
            request_type: name.to_string(),
            requests: self.requests,
            responses: self.responses,
            failures: self.failures,
            in_flight: self.in_flight,
            mean: has.then(|| self.sum / self.responses as f64),
            p50: self.hist.quantile(0.5),
            p99: self.hist.quantile(0.99),
        }
    }
}

/// A request that has been counted but not yet answered.
#[must_use = "an unfinished request stays in flight"]
pub struct InFlight {
    profile: Arc<Mutex<Profile>>,
}

impl InFlight {
    pub fn finish(self, duration: f64, outcome: RequestOutcome) -> Result<(), MetricsError> {
        if duration.is_nan() || duration < 0.0 {
            // leave the request counted as failed rather than in flight forever
            self.profile.lock().finish(0.0, RequestOutcome::Failure);
            return Err(MetricsError::NegativeDuration(duration));
        }
        self.profile.lock().finish(duration, outcome);
        Ok(())
    }
}

/// Registry of request profiles, safe to share between threads.
#[derive(Default)]
pub struct Metrics {
    types: RwLock<BTreeMap<String, Arc<Mutex<Profile>>>>,
}

impl Metrics {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&self, request_type: &str) {
        self.profile(request_type);
    }

    fn profile(&self, request_type: &str) -> Arc<Mutex<Profile>> {
        if let Some(p) = self.types.read().get(request_type) {
            return p.clone();
        }
        self.types
            .write()
            .entry(request_type.to_string())
            .or_default()
            .clone()
    }

    pub fn begin(&self, request_type: &str) -> InFlight {
        let profile = self.profile(request_type);
        {
            let mut p = profile.lock();
            p.requests += 1;
            p.in_flight += 1;
        }
        InFlight { profile }
    }

    /// Counts a completed request.
    pub fn record(
        &self,
        request_type: &str,
        duration: f64,
        outcome: RequestOutcome,
    ) -> Result<RequestProfile, MetricsError> {
        if duration.is_nan() || duration < 0.0 {
            return Err(MetricsError::NegativeDuration(duration));
        }
        let profile = self.profile(request_type);
        let mut p = profile.lock();
        p.requests += 1;
        p.in_flight += 1;
        p.finish(duration, outcome);
        Ok(p.snapshot(request_type))
    }

    pub fn snapshot(&self, request_type: &str) -> Result<RequestProfile, MetricsError> {
        let types = self.types.read();
        let p = types
            .get(request_type)
            .ok_or_else(|| MetricsError::UnknownRequestType(request_type.to_string()))?;
        let snap = p.lock().snapshot(request_type);
        Ok(snap)
    }

    pub fn snapshot_all(&self) -> Vec<RequestProfile> {
        self.types
            .read()
            .iter()
            .map(|(name, p)| p.lock().snapshot(name))
            .collect()
    }

    pub fn quantile(&self, request_type: &str, q: f64) -> Result<f64, MetricsError> {
        if !(q > 0.0 && q <= 1.0) {
            return Err(MetricsError::InvalidQuantile(q));
        }
        let types = self.types.read();
        let p = types
            .get(request_type)
            .ok_or_else(|| MetricsError::UnknownRequestType(request_type.to_string()))?;
        let est = p.lock().hist.quantile(q);
        est.ok_or_else(|| MetricsError::NoSamples(request_type.to_string()))
    }

    /// Histogram of one request type, for merging across gateway replicas.
    pub fn histogram(&self, request_type: &str) -> Option<LatencyHistogram> {
        self.types
            .read()
            .get(request_type)
            .map(|p| p.lock().hist.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use RequestOutcome::*;

    #[test]
    fn three_successes() {
        let m = Metrics::new();
        for d in [10.0, 20.0, 30.0] {
            m.record("get", d, Success).unwrap();
        }
        let p = m.snapshot("get").unwrap();
        assert_eq!((p.requests, p.responses, p.failures), (3, 3, 0));
        assert_eq!(p.mean, Some(20.0));
        assert_eq!(p.p50, Some(20.0));
        assert_eq!(p.p99, Some(30.0));
    }

    #[test]
    fn failures_count_but_do_not_time() {
        let m = Metrics::new();
        m.record("get", 10.0, Success).unwrap();
        m.record("get", 99.0, Failure).unwrap();
        m.record("get", 30.0, Success).unwrap();
        let p = m.snapshot("get").unwrap();
        assert_eq!((p.requests, p.responses, p.failures), (3, 2, 1));
        assert_eq!(p.mean, Some(20.0));
        assert_eq!(m.histogram("get").unwrap().total(), 2);
    }

    #[test]
    fn negative_duration() {
        let m = Metrics::new();
        assert_eq!(
            m.record("get", -1.0, Success),
            Err(MetricsError::NegativeDuration(-1.0))
        );
        let f = m.begin("put");
        assert!(f.finish(-1.0, Success).is_err());
        let p = m.snapshot("put").unwrap();
        assert_eq!((p.requests, p.failures, p.in_flight), (1, 1, 0));
    }

    #[test]
    fn empty_and_unknown() {
        let m = Metrics::new();
        m.register("idle");
        let p = m.snapshot("idle").unwrap();
        assert_eq!(p.requests, 0);
        assert_eq!((p.mean, p.p50, p.p99), (None, None, None));
        assert_eq!(
            m.snapshot("nope"),
            Err(MetricsError::UnknownRequestType("nope".into()))
        );
        assert_eq!(
            m.quantile("idle", 0.5),
            Err(MetricsError::NoSamples("idle".into()))
        );
        assert!(matches!(
            m.quantile("idle", 0.0),
            Err(MetricsError::InvalidQuantile(_))
        ));
    }

    #[test]
    fn in_flight_conservation() {
        let m = Metrics::new();
        let a = m.begin("x");
        let _b = m.begin("x");
        a.finish(1.0, Success).unwrap();
        let p = m.snapshot("x").unwrap();
        assert_eq!(p.requests, p.responses + p.failures + p.in_flight);
        assert_eq!(p.in_flight, 1);
    }

    #[test]
    fn concurrent_recording() {
        let m = Arc::new(Metrics::new());
        let hs: Vec<_> = (0..8)
            .map(|t| {
                let m = m.clone();
                std::thread::spawn(move || {
                    for i in 0..1000 {
                        let o = if (i + t) % 10 == 0 { Failure } else { Success };
                        m.record("svc", i as f64, o).unwrap();
                        let p = m.snapshot("svc").unwrap();
                        assert_eq!(p.requests, p.responses + p.failures + p.in_flight);
                    }
                })
            })
            .collect();
        hs.into_iter().for_each(|h| h.join().unwrap());
        let p = m.snapshot("svc").unwrap();
        assert_eq!(p.requests, 8000);
        assert_eq!(p.responses + p.failures, 8000);
        assert_eq!(m.histogram("svc").unwrap().total(), p.responses);
    }

    #[test]
    fn json_shape() {
        let m = Metrics::new();
        m.record("get", 5.0, Success).unwrap();
        let v = serde_json::to_value(m.snapshot("get").unwrap()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys.len(), 7);
        for k in [
            "type",
            "requests",
            "responses",
            "failures",
            "mean",
            "p50",
            "p99",
        ] {
            assert!(keys.contains(&k), "{k}");
        }
    }
}
