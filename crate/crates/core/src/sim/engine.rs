use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap};

use thiserror::Error;

use super::{EventKind, EventPayload, EventTrace, SimDuration, SimEvent, SimTime, TraceRecord};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("cannot schedule at {at} when the clock is at {now}")]
    SchedulingInPast { at: SimTime, now: SimTime },
    #[error("no handler registered for {0}")]
    UnhandledEventKind(EventKind),
    #[error("event budget of {0} exceeded")]
    EventBudgetExceeded(u64),
}

/// Identifier of a scheduled event; equal to its sequence number.
pub type EventId = u64;

struct Queued(SimEvent);

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.0.timestamp, self.0.seq).cmp(&(other.0.timestamp, other.0.seq))
    }
}

/// Clock and pending-event queue as seen by handlers. Handlers may read the
/// clock and schedule events; only the engine advances time.
#[derive(Default)]
pub struct Scheduler {
    clock: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Reverse<Queued>>,
}

impl Scheduler {
    pub fn now(&self) -> SimTime {
        self.clock
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn schedule(&mut self, at: SimTime, kind: EventKind, payload: EventPayload) -> Result<EventId, SimError> {
        if at < self.clock {
            return Err(SimError::SchedulingInPast { at, now: self.clock });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Queued(SimEvent { timestamp: at, seq, kind, payload })));
        Ok(seq)
    }

    /// Schedules relative to the current clock; cannot be in the past.
    pub fn schedule_in(&mut self, delay: SimDuration, kind: EventKind, payload: EventPayload) -> EventId {
        let at = self.clock + delay;
        self.schedule(at, kind, payload).expect("relative scheduling is never in the past")
    }

    fn peek_time(&self) -> Option<SimTime> {
        self.queue.peek().map(|Reverse(q)| q.0.timestamp)
    }

    fn pop(&mut self) -> Option<SimEvent> {
        self.queue.pop().map(|Reverse(q)| q.0)
    }
}

/// Event consumer driven by [`Engine`].
pub trait Handler {
    type Error: From<SimError>;

    /// Whether this handler accepts `kind`. Popping an event whose kind is not
    /// handled aborts the run with [`SimError::UnhandledEventKind`].
    fn handles(&self, _kind: EventKind) -> bool {
        true
    }

    fn handle(&mut self, event: &SimEvent, sched: &mut Scheduler) -> Result<(), Self::Error>;
}

type Callback<'a, E> = Box<dyn FnMut(&SimEvent, &mut Scheduler) -> Result<(), E> + 'a>;

/// Closure registry keyed by event kind.
pub struct Handlers<'a, E = SimError> {
    map: HashMap<EventKind, Callback<'a, E>>,
}

impl<'a, E: From<SimError>> Handlers<'a, E> {
    pub fn new() -> Self {
        Handlers { map: HashMap::new() }
    }

    pub fn on<F>(mut self, kind: EventKind, f: F) -> Self
    where
        F: FnMut(&SimEvent, &mut Scheduler) -> Result<(), E> + 'a,
    {
        self.map.insert(kind, Box::new(f));
        self
    }

    /// Registers a no-op handler for each kind.
    pub fn ignore(mut self, kinds: &[EventKind]) -> Self {
        for &k in kinds {
            self.map.insert(k, Box::new(|_, _| Ok(())));
        }
        self
    }
}

impl<E: From<SimError>> Default for Handlers<'_, E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: From<SimError>> Handler for Handlers<'_, E> {
    type Error = E;

    fn handles(&self, kind: EventKind) -> bool {
        self.map.contains_key(&kind)
    }

    fn handle(&mut self, event: &SimEvent, sched: &mut Scheduler) -> Result<(), E> {
        match self.map.get_mut(&event.kind) {
            Some(f) => f(event, sched),
            None => Err(SimError::UnhandledEventKind(event.kind).into()),
        }
    }
}

/// Single-threaded discrete-event engine.
#[derive(Default)]
pub struct Engine {
    sched: Scheduler,
    max_events: Option<u64>,
    processed: u64,
}

impl Engine {
    pub fn new() -> Self {
        Self::default()
    }

    /// Caps the total number of events this engine will process.
    pub fn with_event_budget(mut self, max_events: u64) -> Self {
        self.max_events = Some(max_events);
        self
    }

    pub fn now(&self) -> SimTime {
        self.sched.now()
    }

    pub fn processed(&self) -> u64 {
        self.processed
    }

    pub fn pending(&self) -> usize {
        self.sched.pending()
    }

    pub fn scheduler(&mut self) -> &mut Scheduler {
        &mut self.sched
    }

    pub fn schedule(&mut self, at: SimTime, kind: EventKind, payload: EventPayload) -> Result<EventId, SimError> {
        self.sched.schedule(at, kind, payload)
    }

    /// Processes every event with timestamp `<= t_end`, then sets the clock
    /// to `t_end`. Returns the events processed by this call.
    pub fn run_until<H: Handler>(&mut self, t_end: SimTime, handler: &mut H) -> Result<EventTrace, H::Error> {
        let mut trace = EventTrace::new();
        while self.sched.peek_time().is_some_and(|t| t <= t_end) {
            self.step(handler, &mut trace)?;
        }
        if t_end > self.sched.clock {
            self.sched.clock = t_end;
        }
        Ok(trace)
    }

    /// Processes events until the queue drains.
    pub fn run_to_completion<H: Handler>(&mut self, handler: &mut H) -> Result<EventTrace, H::Error> {
        let mut trace = EventTrace::new();
        while self.sched.peek_time().is_some() {
            self.step(handler, &mut trace)?;
        }
        Ok(trace)
    }

    fn step<H: Handler>(&mut self, handler: &mut H, trace: &mut EventTrace) -> Result<(), H::Error> {
        if let Some(cap) = self.max_events {
            if self.processed >= cap {
                return Err(SimError::EventBudgetExceeded(cap).into());
            }
        }
        let ev = self.sched.pop().expect("caller checked non-empty");
        if !handler.handles(ev.kind) {
            return Err(SimError::UnhandledEventKind(ev.kind).into());
        }
        debug_assert!(ev.timestamp >= self.sched.clock);
        self.sched.clock = ev.timestamp;
        self.processed += 1;
        trace.push(TraceRecord::from(&ev));
        handler.handle(&ev, &mut self.sched)
    }
}
