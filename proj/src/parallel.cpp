#include "xsep/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <mutex>
#include <thread>

#if defined(__x86_64__) || defined(__i386__)
#include <immintrin.h>
#define XSEP_CPU_PAUSE() _mm_pause()
#else
#define XSEP_CPU_PAUSE() std::this_thread::yield()
#endif

namespace xsep {

namespace {

std::atomic<int> g_threads{1};

// Persistent pool tuned for many short tasks: workers spin briefly for the
// next generation before sleeping, and the publisher spins for completion.
// run() returns only after every worker has checked in for the current
// generation, so the plain task fields are never written while read.
class Pool {
public:
    Pool() {
        const unsigned hw = std::thread::hardware_concurrency();
        workers_ = hw > 1 ? static_cast<int>(hw) - 1 : 1;
        for (int i = 0; i < workers_; ++i)
            threads_.emplace_back([this] { worker_loop(); });
    }

    ~Pool() {
        {
            std::lock_guard<std::mutex> lk(mu_);
            stop_.store(true, std::memory_order_release);
        }
        cv_.notify_all();
        for (auto& t : threads_) t.join();
    }

    void run(std::size_t count, int chunks,
             const std::function<void(std::size_t, std::size_t)>& fn) {
        count_ = count;
        chunks_ = chunks;
        fn_ = &fn;
        next_chunk_.store(0, std::memory_order_relaxed);
        done_count_.store(0, std::memory_order_relaxed);
        generation_.fetch_add(1, std::memory_order_release);
        {
            // Every worker must check in, so sleeping ones are always woken;
            // the futex cost overlaps with the publisher's own drain.
            std::lock_guard<std::mutex> lk(mu_);
            cv_.notify_all();
        }

        drain();

        while (done_count_.load(std::memory_order_acquire) != workers_) XSEP_CPU_PAUSE();
    }

private:
    void drain() {
        for (;;) {
            const int c = next_chunk_.fetch_add(1, std::memory_order_relaxed);
            if (c >= chunks_) break;
            const std::size_t lo = count_ * static_cast<std::size_t>(c) / chunks_;
            const std::size_t hi = count_ * (static_cast<std::size_t>(c) + 1) / chunks_;
            if (lo < hi) (*fn_)(lo, hi);
        }
    }

    void worker_loop() {
        constexpr int kSpinLimit = 40000;
        std::uint64_t seen = 0;
        for (;;) {
            int spins = 0;
            while (generation_.load(std::memory_order_acquire) == seen) {
                if (stop_.load(std::memory_order_acquire)) return;
                if (++spins > kSpinLimit) {
                    std::unique_lock<std::mutex> lk(mu_);
                    cv_.wait(lk, [&] {
                        return stop_.load(std::memory_order_acquire) ||
                               generation_.load(std::memory_order_acquire) != seen;
                    });
                    break;
                }
                XSEP_CPU_PAUSE();
            }
            if (stop_.load(std::memory_order_acquire)) return;
            seen = generation_.load(std::memory_order_acquire);
            drain();
            done_count_.fetch_add(1, std::memory_order_release);
        }
    }

    int workers_ = 1;
    std::vector<std::thread> threads_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::atomic<bool> stop_{false};
    std::atomic<std::uint64_t> generation_{0};
    std::atomic<int> next_chunk_{0};
    std::atomic<int> done_count_{0};

    std::size_t count_ = 0;
    int chunks_ = 0;
    const std::function<void(std::size_t, std::size_t)>* fn_ = nullptr;
};

Pool& pool() {
    static Pool p;
    return p;
}

}  // namespace

void set_num_threads(int n) { g_threads.store(n < 1 ? 1 : n, std::memory_order_relaxed); }

int num_threads() { return g_threads.load(std::memory_order_relaxed); }

void parallel_for(std::size_t count, const std::function<void(std::size_t, std::size_t)>& fn) {
    if (count == 0) return;
    const int threads = num_threads();
    if (threads <= 1 || count == 1) {
        fn(0, count);
        return;
    }
    const int chunks =
        static_cast<int>(std::min<std::size_t>(count, static_cast<std::size_t>(threads)));
    pool().run(count, chunks, fn);
}

}  // namespace xsep
