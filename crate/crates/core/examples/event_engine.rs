//! The event core on its own: a closure-driven ping-pong between two
//! kinds, run to a horizon, exported with its hash footer.

use stagesim::sim::{Engine, EventKind, EventPayload, Handlers, SimDuration, SimError, SimTime};

fn main() -> Result<(), SimError> {
    let mut engine = Engine::new();
    // Two arrivals tie at t=0; the one scheduled first pops first.
    engine.schedule(SimTime::ZERO, EventKind::RequestArrival, EventPayload::default().request(0))?;
    engine.schedule(SimTime::ZERO, EventKind::RequestArrival, EventPayload::default().request(1))?;

    let step = SimDuration::from_micros(250.0);
    let mut handlers: Handlers = Handlers::new()
        .on(EventKind::RequestArrival, |ev, s| {
            s.schedule_in(step, EventKind::TokenEmitted, ev.payload.clone().tokens(1));
            Ok(())
        })
        .on(EventKind::TokenEmitted, |ev, s| {
            let n = ev.payload.tokens.unwrap_or(0);
            if n < 3 {
                s.schedule_in(step, EventKind::TokenEmitted, ev.payload.clone().tokens(n + 1));
            } else {
                s.schedule_in(SimDuration::ZERO, EventKind::RequestComplete, ev.payload.clone());
            }
            Ok(())
        })
        .ignore(&[EventKind::RequestComplete]);

    let first = engine.run_until(SimTime(500_000), &mut handlers)?;
    println!("by 500us: {} events, clock {} ns, {} pending", first.len(), engine.now().0, engine.pending());
    let rest = engine.run_to_completion(&mut handlers)?;
    let mut trace = first;
    trace.append(rest);
    print!("{}", trace.to_export_string());
    Ok(())
}
