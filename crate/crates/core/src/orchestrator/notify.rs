use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use super::store::{JobEvent, JobStore};

pub const WEBHOOK_ATTEMPTS: u32 = 3;

/// One webhook delivery attempt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delivery {
    pub job_id: String,
    pub seq: u64,
    pub url: String,
    pub attempt: u32,
    pub ok: bool,
    pub error: Option<String>,
}

/// POSTs every job event to the job's webhook, if any. Delivery runs on its
/// own thread and never affects the job.
pub struct WebhookNotifier {
    deliveries: Arc<Mutex<Vec<Delivery>>>,
    handle: Option<JoinHandle<()>>,
}

impl WebhookNotifier {
    /// Starts delivering events logged by `store` from now on. The first
    /// retry waits `backoff`, each later one twice as long.
    pub fn start(store: Arc<JobStore>, backoff: Duration) -> Self {
        let rx = store.subscribe();
        let deliveries = Arc::new(Mutex::new(Vec::new()));
        let log = deliveries.clone();
        let handle = std::thread::Builder::new()
            .name("morf-webhook".into())
            .spawn(move || {
                let client = match reqwest::blocking::Client::builder()
                    .timeout(Duration::from_secs(5))
                    .build()
                {
                    Ok(c) => c,
                    Err(e) => {
                        warn!(error = %e, "webhook client unavailable; notifications disabled");
                        return;
                    }
                };
                for event in rx {
                    let Some(url) = store.get(&event.job_id).and_then(|j| j.webhook) else {
                        continue;
                    };
                    deliver(&client, &url, &event, backoff, &log);
                }
            })
            .expect("spawn webhook thread");
        WebhookNotifier {
            deliveries,
            handle: Some(handle),
        }
    }

    pub fn deliveries(&self) -> Vec<Delivery> {
        self.deliveries.lock().expect("delivery log lock").clone()
    }

    pub fn is_running(&self) -> bool {
        self.handle.as_ref().is_some_and(|h| !h.is_finished())
    }
}

fn deliver(
    client: &reqwest::blocking::Client,
    url: &str,
    event: &JobEvent,
    backoff: Duration,
    log: &Mutex<Vec<Delivery>>,
) {
    let mut wait = backoff;
    for attempt in 1..=WEBHOOK_ATTEMPTS {
        let result = client
            .post(url)
            .json(event)
            .send()
            .map_err(|e| e.to_string())
            .and_then(|r| {
                if r.status().is_success() {
                    Ok(())
                } else {
                    Err(format!("HTTP {}", r.status()))
                }
            });
        let ok = result.is_ok();
        match &result {
            Ok(()) => debug!(job = %event.job_id, seq = event.seq, attempt, "webhook delivered"),
            Err(e) => {
                warn!(job = %event.job_id, seq = event.seq, attempt, error = %e, "webhook delivery failed")
            }
        }
        log.lock().expect("delivery log lock").push(Delivery {
            job_id: event.job_id.clone(),
            seq: event.seq,
            url: url.to_string(),
            attempt,
            ok,
            error: result.err(),
        });
        if ok {
            return;
        }
        if attempt < WEBHOOK_ATTEMPTS {
            std::thread::sleep(wait);
            wait *= 2;
        }
    }
}
