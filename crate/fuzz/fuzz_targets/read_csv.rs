#![no_main]

use libfuzzer_sys::fuzz_target;
use rpt_core::data::read_csv;
use rpt_core::layers::Task;

fuzz_target!(|data: &[u8]| {
    for task in [Task::Classify, Task::Regress] {
        if let Ok(loaded) = read_csv(data, task, true) {
            for r in &loaded.records {
                assert!(r.target.is_finite());
                if task == Task::Regress {
                    assert!(r.target > 0.0);
                }
            }
        }
        let _ = read_csv(data, task, false);
    }
});
