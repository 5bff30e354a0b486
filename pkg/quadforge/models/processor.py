import queue
from enum import Enum
from multiprocessing import Process, Queue, Value
from typing import Any, Callable, Dict, List, Optional, Sequence

from quadforge.models.result import ChunkResult, WorkItem
from quadforge.utils.logger import get_logger

logger = get_logger(__name__)


class Signals(Enum):
    shutdown = "shutdown"


class Stats(Enum):
    inputs_processed = "inputs_processed"


class Processor:
    """Pool of worker processes applying target_function to WorkItem payloads.

    Each result carries the index of its work item, so callers can reassemble outputs in input order.
    """

    def __init__(self, target_function: Callable, name: str, instances: int = 1):
        if instances < 1:
            raise ValueError(f"A processor needs at least one instance, got {instances}.")
        self.target_function = target_function
        self.name = name
        self.instances = instances
        self._signal_queues = [Queue() for _ in range(instances)]
        self._input_queue = Queue()
        self._output_queue = Queue()
        self._processes = []
        self._stats = {i: {Stats.inputs_processed.value: Value('i', 0)} for i in range(instances)}

    def start(self):
        if self._processes:
            raise RuntimeError("This processor has already been started. You cannot start it again.")
        for instance in range(self.instances):
            process = Process(target=self._run,
                              args=(self.name, instance,
                                    self.target_function,
                                    self._stats[instance][Stats.inputs_processed.value],
                                    self._signal_queues[instance],
                                    self._input_queue,
                                    self._output_queue),
                              daemon=True)
            self._processes.append(process)
        logger.debug(f"Starting processor {self.name} with {self.instances} instances...")
        for process in self._processes:
            process.start()

    def shutdown(self):
        logger.debug(f"Shutting down processor {self.name}...")
        alive_processes = [process for process in self._processes if process.is_alive()]
        while alive_processes:
            for i in range(self.instances):
                if self._processes[i].is_alive():
                    self._signal_queues[i].put(Signals.shutdown.value)
                    logger.debug(f"Waiting for process {self.name} instance {i} to shut down...")
                    self._processes[i].join(timeout=10)
            alive_processes = [process for process in self._processes if process.is_alive()]

    def push_input(self, item: WorkItem):
        self._input_queue.put(item)

    def get_output(self, timeout: Optional[float] = None) -> ChunkResult:
        return self._output_queue.get(timeout=timeout)

    def get_stats(self) -> Dict[int, Any]:
        return self._stats

    def inputs_processed(self) -> int:
        return sum(stats[Stats.inputs_processed.value].value for stats in self._stats.values())

    @staticmethod
    def _run(processor_name: str,
             instance: int,
             target_function: Callable,
             inputs_processed: Value,
             signal_queue: Queue,
             input_queue: Queue,
             output_queue: Queue):
        while True:
            if not signal_queue.empty():
                signal = signal_queue.get()
                if signal == Signals.shutdown.value:
                    logger.debug(f"Shutting down instance {instance} for processor {processor_name}...")
                    return
            try:
                item = input_queue.get(timeout=1)
            except queue.Empty:
                continue
            try:
                result = ChunkResult(processor=processor_name, index=item.index, output=target_function(item.payload))
            except Exception as e:
                logger.error(f"Target function {target_function} threw an exception")
                logger.error(f"{type(e).__name__}: {e}")
                result = ChunkResult(processor=processor_name, index=item.index, error=f"{type(e).__name__}: {e}")
            with inputs_processed.get_lock():
                inputs_processed.value += 1
            output_queue.put(result)


def map_chunks(target_function: Callable, payloads: Sequence[Any], instances: int = 1,
               name: str = "chunks") -> List[Any]:
    """Apply target_function to every payload, in worker processes when instances > 1, in payload order."""
    if instances <= 1 or len(payloads) <= 1:
        return [target_function(payload) for payload in payloads]
    processor = Processor(target_function=target_function, name=name, instances=min(instances, len(payloads)))
    outputs: List[Optional[ChunkResult]] = [None] * len(payloads)
    try:
        processor.start()
        for index, payload in enumerate(payloads):
            processor.push_input(WorkItem(index=index, payload=payload))
        for _ in range(len(payloads)):
            result = processor.get_output()
            outputs[result.index] = result
    finally:
        processor.shutdown()
    failures = [result.error for result in outputs if result.error]
    if failures:
        raise RuntimeError(f"Processor {name} failed on {len(failures)} chunks: {failures[0]}")
    return [result.output for result in outputs]
