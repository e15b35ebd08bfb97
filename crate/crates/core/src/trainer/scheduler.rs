//! Work-stealing execution of dependency-ordered task units.
//!
//! Each worker owns a FIFO queue; idle workers steal from the tail of the
//! busiest queue (ties to the lowest worker id). Deterministic mode disables
//! concurrency and executes in fixed topological-FIFO order.

use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};

use crate::error::{CoreError, Result};

pub type TaskId = usize;

pub struct TaskSpec<'a> {
    /// Ids of tasks that must complete first.
    pub deps: Vec<TaskId>,
    /// Preferred initial queue; round-robin when absent.
    pub assign: Option<usize>,
    pub run: Box<dyn FnOnce() + Send + 'a>,
}

/// Execution record: completion order and per-worker counts.
#[derive(Debug, Clone, Default)]
pub struct ScheduleLog {
    pub order: Vec<(TaskId, usize)>,
    pub per_worker: Vec<usize>,
}

struct SchedState {
    queues: Vec<VecDeque<TaskId>>,
    /// Remaining unmet dependencies per task.
    blocked: Vec<usize>,
    dependents: Vec<Vec<TaskId>>,
    remaining: usize,
    log: ScheduleLog,
}

/// Runs every task exactly once, respecting dependencies.
pub fn schedule(tasks: Vec<TaskSpec<'_>>, workers: usize, deterministic: bool) -> Result<ScheduleLog> {
    let n = tasks.len();
    let workers = workers.max(1);
    for (id, t) in tasks.iter().enumerate() {
        for &d in &t.deps {
            if d >= n {
                return Err(CoreError::Config(format!(
                    "task {id} depends on unknown task {d}"
                )));
            }
        }
    }
    // Cycle detection (Kahn).
    {
        let mut indeg: Vec<usize> = tasks.iter().map(|t| t.deps.len()).collect();
        let mut dependents: Vec<Vec<TaskId>> = vec![Vec::new(); n];
        for (id, t) in tasks.iter().enumerate() {
            for &d in &t.deps {
                dependents[d].push(id);
            }
        }
        let mut ready: VecDeque<TaskId> =
            (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut seen = 0;
        while let Some(t) = ready.pop_front() {
            seen += 1;
            for &d in &dependents[t] {
                indeg[d] -= 1;
                if indeg[d] == 0 {
                    ready.push_back(d);
                }
            }
        }
        if seen != n {
            return Err(CoreError::Config("dependency cycle in task set".into()));
        }
    }

    if deterministic || workers == 1 {
        return Ok(run_serial(tasks));
    }
    run_parallel(tasks, workers)
}

fn run_serial(tasks: Vec<TaskSpec<'_>>) -> ScheduleLog {
    let n = tasks.len();
    let mut blocked: Vec<usize> = tasks.iter().map(|t| t.deps.len()).collect();
    let mut dependents: Vec<Vec<TaskId>> = vec![Vec::new(); n];
    for (id, t) in tasks.iter().enumerate() {
        for &d in &t.deps {
            dependents[d].push(id);
        }
    }
    let mut runs: Vec<Option<Box<dyn FnOnce() + Send + '_>>> =
        tasks.into_iter().map(|t| Some(t.run)).collect();
    let mut queue: VecDeque<TaskId> = (0..n).filter(|&i| blocked[i] == 0).collect();
    let mut log = ScheduleLog {
        order: Vec::with_capacity(n),
        per_worker: vec![0; 1],
    };
    while let Some(t) = queue.pop_front() {
        (runs[t].take().unwrap())();
        log.order.push((t, 0));
        log.per_worker[0] += 1;
        for &d in &dependents[t] {
            blocked[d] -= 1;
            if blocked[d] == 0 {
                queue.push_back(d);
            }
        }
    }
    log
}

fn run_parallel(tasks: Vec<TaskSpec<'_>>, workers: usize) -> Result<ScheduleLog> {
    let n = tasks.len();
    let mut dependents: Vec<Vec<TaskId>> = vec![Vec::new(); n];
    let blocked: Vec<usize> = tasks.iter().map(|t| t.deps.len()).collect();
    for (id, t) in tasks.iter().enumerate() {
        for &d in &t.deps {
            dependents[d].push(id);
        }
    }
    let mut queues: Vec<VecDeque<TaskId>> = vec![VecDeque::new(); workers];
    let mut rr = 0usize;
    for (id, t) in tasks.iter().enumerate() {
        if blocked[id] == 0 {
            let w = t.assign.unwrap_or_else(|| {
                rr += 1;
                (rr - 1) % workers
            });
            queues[w % workers].push_back(id);
        }
    }
    type RunSlot<'a> = Mutex<Option<Box<dyn FnOnce() + Send + 'a>>>;
    let assigns: Vec<Option<usize>> = tasks.iter().map(|t| t.assign).collect();
    let runs: Vec<RunSlot<'_>> = tasks
        .into_iter()
        .map(|t| Mutex::new(Some(t.run)))
        .collect();

    let state = Mutex::new(SchedState {
        queues,
        blocked,
        dependents,
        remaining: n,
        log: ScheduleLog {
            order: Vec::with_capacity(n),
            per_worker: vec![0; workers],
        },
    });
    let cv = Condvar::new();

    std::thread::scope(|scope| {
        for w in 0..workers {
            let state = &state;
            let cv = &cv;
            let runs = &runs;
            let assigns = &assigns;
            scope.spawn(move || loop {
                let task = {
                    let mut st = state.lock().unwrap();
                    loop {
                        if st.remaining == 0 {
                            return;
                        }
                        // Own queue first (FIFO), then steal from the tail
                        // of the busiest queue, ties to the lowest id.
                        if let Some(t) = st.queues[w].pop_front() {
                            break Some(t);
                        }
                        let victim = (0..st.queues.len())
                            .filter(|&q| q != w && !st.queues[q].is_empty())
                            .max_by(|&a, &b| {
                                st.queues[a]
                                    .len()
                                    .cmp(&st.queues[b].len())
                                    .then(b.cmp(&a))
                            });
                        if let Some(v) = victim {
                            break st.queues[v].pop_back();
                        }
                        st = cv.wait(st).unwrap();
                    }
                };
                let Some(task) = task else { continue };
                let run = runs[task].lock().unwrap().take().expect("task ran twice");
                run();
                let mut st = state.lock().unwrap();
                st.log.order.push((task, w));
                st.log.per_worker[w] += 1;
                st.remaining -= 1;
                let deps = st.dependents[task].clone();
                for d in deps {
                    st.blocked[d] -= 1;
                    if st.blocked[d] == 0 {
                        let dest = assigns[d].map(|a| a % st.queues.len()).unwrap_or(w);
                        st.queues[dest].push_back(d);
                    }
                }
                cv.notify_all();
            });
        }
    });

    Ok(state.into_inner().unwrap().log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;
    use std::time::Duration;

    #[test]
    fn single_worker_is_pure_fifo() {
        let seen = Arc::new(Mutex::new(Vec::new()));
        let tasks: Vec<TaskSpec> = (0..5)
            .map(|i| {
                let seen = seen.clone();
                TaskSpec {
                    deps: vec![],
                    assign: None,
                    run: Box::new(move || seen.lock().unwrap().push(i)),
                }
            })
            .collect();
        let log = schedule(tasks, 1, false).unwrap();
        assert_eq!(*seen.lock().unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(log.per_worker, vec![5]);
    }

    #[test]
    fn idle_worker_steals_half_of_the_load() {
        // All four equal tasks start on worker 0; worker 1 steals two.
        let tasks: Vec<TaskSpec> = (0..4)
            .map(|_| TaskSpec {
                deps: vec![],
                assign: Some(0),
                run: Box::new(|| std::thread::sleep(Duration::from_millis(25))),
            })
            .collect();
        let log = schedule(tasks, 2, false).unwrap();
        assert_eq!(log.per_worker.iter().sum::<usize>(), 4);
        assert_eq!(
            log.per_worker,
            vec![2, 2],
            "steal balance: {:?}",
            log.per_worker
        );
    }

    #[test]
    fn dependencies_never_invert_under_random_timing() {
        for round in 0..100 {
            let flag = Arc::new(AtomicUsize::new(0));
            let f1 = flag.clone();
            let f2 = flag.clone();
            let jitter = (round % 7) as u64;
            let tasks = vec![
                TaskSpec {
                    deps: vec![],
                    assign: Some(0),
                    run: Box::new(move || {
                        std::thread::sleep(Duration::from_micros(jitter * 50));
                        f1.store(1, Ordering::SeqCst);
                    }),
                },
                TaskSpec {
                    deps: vec![0],
                    assign: Some(1),
                    run: Box::new(move || {
                        assert_eq!(f2.load(Ordering::SeqCst), 1, "dependency inverted");
                    }),
                },
                // Unrelated noise tasks.
                TaskSpec {
                    deps: vec![],
                    assign: Some(1),
                    run: Box::new(|| {}),
                },
                TaskSpec {
                    deps: vec![],
                    assign: Some(0),
                    run: Box::new(|| {}),
                },
            ];
            let log = schedule(tasks, 2, false).unwrap();
            let pos = |id: TaskId| log.order.iter().position(|&(t, _)| t == id).unwrap();
            assert!(pos(0) < pos(1));
        }
    }

    #[test]
    fn cycle_is_a_configuration_error() {
        let tasks = vec![
            TaskSpec {
                deps: vec![1],
                assign: None,
                run: Box::new(|| {}),
            },
            TaskSpec {
                deps: vec![0],
                assign: None,
                run: Box::new(|| {}),
            },
        ];
        assert!(matches!(
            schedule(tasks, 2, false),
            Err(CoreError::Config(_))
        ));
    }

    #[test]
    fn deterministic_mode_serializes() {
        let seen = Arc::new(Mutex::new(Vec::new()));
        let tasks: Vec<TaskSpec> = (0..6)
            .map(|i| {
                let seen = seen.clone();
                TaskSpec {
                    deps: if i >= 3 { vec![i - 3] } else { vec![] },
                    assign: None,
                    run: Box::new(move || seen.lock().unwrap().push(i)),
                }
            })
            .collect();
        let log = schedule(tasks, 4, true).unwrap();
        assert_eq!(*seen.lock().unwrap(), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(log.per_worker, vec![6]);
    }
}
