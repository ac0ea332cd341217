use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp;

use crate::model::{in_service_prefix, ClassIndex, Occupancy, SystemState, ValidatedConfig};

/// Source of arrival epochs and service requirements for an [`Engine`].
///
/// `service_time(i)` is called once per admitted class-`i` job, in admission
/// order.
pub(crate) trait Randomness {
    fn next_arrival(&mut self, now: f64) -> Option<(f64, ClassIndex)>;
    fn service_time(&mut self, class: ClassIndex) -> f64;
}

/// One ChaCha stream drives everything: superposed Poisson arrivals with the
/// class drawn from `lambda_i / Lambda`, and exponential service draws.
pub(crate) struct SeededStream {
    rng: ChaCha8Rng,
    interarrival: Option<Exp<f64>>,
    class_pick: Option<WeightedIndex<f64>>,
    service: Vec<Exp<f64>>,
}

impl SeededStream {
    pub(crate) fn new(cfg: &ValidatedConfig, seed: u64) -> Self {
        let total = cfg.total_arrival_rate();
        let (interarrival, class_pick) = if total > 0.0 {
            (
                Some(Exp::new(total).expect("positive total rate")),
                Some(WeightedIndex::new(cfg.arrival_rates()).expect("nonnegative weights")),
            )
        } else {
            (None, None)
        };
        let service = cfg
            .service_rates()
            .iter()
            .map(|&mu| Exp::new(mu).expect("validated service rate"))
            .collect();
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            interarrival,
            class_pick,
            service,
        }
    }
}

impl Randomness for SeededStream {
    fn next_arrival(&mut self, now: f64) -> Option<(f64, ClassIndex)> {
        let gap = self.interarrival.as_ref()?.sample(&mut self.rng);
        let class = self.class_pick.as_ref()?.sample(&mut self.rng);
        Some((now + gap, class))
    }

    fn service_time(&mut self, class: ClassIndex) -> f64 {
        self.service[class].sample(&mut self.rng)
    }
}

#[derive(Debug, Clone, Copy)]
struct Departure {
    time: f64,
    seq: u64,
    class: ClassIndex,
}

// min-heap on (time, seq)
impl Ord for Departure {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}
impl PartialOrd for Departure {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl PartialEq for Departure {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Departure {}

#[derive(Debug, Clone, Copy)]
struct Waiting {
    seq: u64,
    class: ClassIndex,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Event {
    Arrival {
        time: f64,
        class: ClassIndex,
        admitted: bool,
    },
    Departure {
        time: f64,
        class: ClassIndex,
    },
}

impl Event {
    pub(crate) fn time(&self) -> f64 {
        match *self {
            Event::Arrival { time, .. } | Event::Departure { time, .. } => time,
        }
    }
}

/// Event calendar for the FCFS multi-server-job CTMC.
///
/// Service completions are scheduled at admission; the next arrival is kept
/// outside the heap. Jobs carry a sequence number in arrival order so the
/// ordered state can be rebuilt for verification.
pub(crate) struct Engine<R> {
    num_servers: u32,
    needs: Vec<u32>,
    src: R,
    now: f64,
    next_arrival: Option<(f64, ClassIndex)>,
    departures: BinaryHeap<Departure>,
    queue: VecDeque<Waiting>,
    in_system: Vec<u32>,
    in_queue: Vec<u32>,
    busy: u32,
    next_seq: u64,
}

impl<R: Randomness> Engine<R> {
    pub(crate) fn new(cfg: &ValidatedConfig, src: R, initial: &SystemState) -> Self {
        Self::with_servers(cfg.num_servers(), cfg.needs().to_vec(), src, initial)
    }

    pub(crate) fn with_servers(num_servers: u32, needs: Vec<u32>, src: R, initial: &SystemState) -> Self {
        let k = needs.len();
        let mut engine = Self {
            num_servers,
            needs,
            src,
            now: 0.0,
            next_arrival: None,
            departures: BinaryHeap::new(),
            queue: VecDeque::new(),
            in_system: vec![0; k],
            in_queue: vec![0; k],
            busy: 0,
            next_seq: 0,
        };
        // placing the initial jobs in order reproduces the in-service prefix
        for &class in &initial.jobs {
            engine.enter(class);
        }
        engine.next_arrival = engine.src.next_arrival(0.0);
        engine
    }

    pub(crate) fn now(&self) -> f64 {
        self.now
    }

    pub(crate) fn in_system(&self) -> &[u32] {
        &self.in_system
    }

    pub(crate) fn occupancy(&self) -> Occupancy {
        Occupancy {
            in_system: self.in_system.clone(),
            in_queue: self.in_queue.clone(),
            busy_servers: self.busy,
        }
    }

    pub(crate) fn next_event_time(&self) -> Option<f64> {
        let ta = self.next_arrival.map(|(t, _)| t);
        let td = self.departures.peek().map(|d| d.time);
        match (ta, td) {
            (Some(a), Some(d)) => Some(a.min(d)),
            (a, d) => a.or(d),
        }
    }

    pub(crate) fn step(&mut self) -> Option<Event> {
        let td = self.departures.peek().map(|d| d.time);
        match self.next_arrival {
            Some((ta, class)) if td.is_none_or(|td| ta <= td) => {
                self.now = ta;
                let admitted = self.enter(class);
                self.next_arrival = self.src.next_arrival(self.now);
                Some(Event::Arrival {
                    time: ta,
                    class,
                    admitted,
                })
            }
            _ => {
                let dep = self.departures.pop()?;
                self.now = dep.time;
                self.busy -= self.needs[dep.class];
                self.in_system[dep.class] -= 1;
                self.admit_from_head();
                Some(Event::Departure {
                    time: dep.time,
                    class: dep.class,
                })
            }
        }
    }

    fn enter(&mut self, class: ClassIndex) -> bool {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.in_system[class] += 1;
        if self.queue.is_empty() && self.num_servers - self.busy >= self.needs[class] {
            self.start_service(seq, class);
            true
        } else {
            self.queue.push_back(Waiting { seq, class });
            self.in_queue[class] += 1;
            false
        }
    }

    fn admit_from_head(&mut self) {
        while let Some(head) = self.queue.front().copied() {
            if self.num_servers - self.busy < self.needs[head.class] {
                break;
            }
            self.queue.pop_front();
            self.in_queue[head.class] -= 1;
            self.start_service(head.seq, head.class);
        }
    }

    fn start_service(&mut self, seq: u64, class: ClassIndex) {
        self.busy += self.needs[class];
        let service = self.src.service_time(class);
        self.departures.push(Departure {
            time: self.now + service,
            seq,
            class,
        });
    }

    /// Every job present, oldest first, and how many of them are in service.
    pub(crate) fn ordered_state(&self) -> (SystemState, usize) {
        let mut serving: Vec<(u64, ClassIndex)> =
            self.departures.iter().map(|d| (d.seq, d.class)).collect();
        serving.sort_unstable();
        let prefix = serving.len();
        let jobs = serving
            .into_iter()
            .map(|(_, c)| c)
            .chain(self.queue.iter().map(|w| w.class))
            .collect();
        (SystemState { jobs }, prefix)
    }

    /// Recomputes the occupancy from the ordered state and compares it with
    /// the incrementally maintained counters.
    pub(crate) fn verify(&self, cfg: &ValidatedConfig) -> Result<(), String> {
        let max_serving = self.departures.iter().map(|d| d.seq).max();
        let min_waiting = self.queue.iter().map(|w| w.seq).min();
        if let (Some(s), Some(w)) = (max_serving, min_waiting) {
            if s > w {
                return Err(format!("job {s} in service but older job {w} waits"));
            }
        }
        let (state, prefix) = self.ordered_state();
        let recomputed = in_service_prefix(&state, cfg);
        let live = self.occupancy();
        if recomputed != live {
            return Err(format!(
                "incremental occupancy {live:?} differs from prefix rule {recomputed:?}"
            ));
        }
        if recomputed.total_jobs() - recomputed.queue_len() != prefix as u32 {
            return Err("in-service set is not the maximal fitting prefix".into());
        }
        let head_need = self.queue.front().map(|w| self.needs[w.class]);
        live.check(cfg, head_need)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ClusterConfig;

    /// Deterministic source: fixed arrival list, unit service times.
    struct Scripted {
        arrivals: Vec<(f64, ClassIndex)>,
        pos: usize,
    }

    impl Randomness for Scripted {
        fn next_arrival(&mut self, _now: f64) -> Option<(f64, ClassIndex)> {
            let a = self.arrivals.get(self.pos).copied();
            self.pos += 1;
            a
        }
        fn service_time(&mut self, _class: ClassIndex) -> f64 {
            1.0
        }
    }

    #[test]
    fn blocked_head_holds_back_small_job() {
        let cfg = ClusterConfig::from_triples(3, &[(1, 1.0, 1.0), (3, 1.0, 1.0)])
            .validate()
            .unwrap();
        let src = Scripted {
            arrivals: vec![(0.1, 0), (0.2, 1), (0.3, 0)],
            pos: 0,
        };
        let mut e = Engine::new(&cfg, src, &SystemState::empty());
        let mut admitted = vec![];
        while let Some(ev) = e.step() {
            e.verify(&cfg).unwrap();
            if let Event::Arrival { admitted: a, .. } = ev {
                admitted.push(a);
            }
        }
        // the second small job waits behind the whole-machine job
        assert_eq!(admitted, vec![true, false, false]);
        assert!((e.now() - 3.1).abs() < 1e-12);
    }

    #[test]
    fn initial_state_uses_prefix_rule() {
        let cfg = ClusterConfig::from_triples(3, &[(1, 1.0, 0.0), (3, 1.0, 0.0)])
            .validate()
            .unwrap();
        let init = SystemState::from_classes(vec![0, 1, 0]);
        let e = Engine::new(&cfg, SeededStream::new(&cfg, 1), &init);
        assert_eq!(e.occupancy(), in_service_prefix(&init, &cfg));
        assert_eq!(e.ordered_state().0, init);
    }
}
