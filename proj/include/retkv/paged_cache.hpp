// Copyright (C) 2026 retkv authors
// SPDX-License-Identifier: Apache-2.0

// Paged KV storage. Every (layer, head) owns a block table: an ordered list of
// fixed-size pages that together hold a variable-length logical sequence.
// Eviction leaves tombstones; a page whose last live slot is evicted goes back
// to a LIFO free list. `compact` repacks one head into the fewest pages.

#pragma once

#include "retkv/attention.hpp"
#include "retkv/numerics.hpp"

#include <json.hpp>

#include <algorithm>
#include <limits>
#include <unordered_map>
#include <vector>

namespace retkv {

class CapacityError : public Error {
public:
    using Error::Error;
};

struct CacheEntry {
    Vector key;
    Vector value;
    Index birth = 0;
    double beta = 1.0;
};

struct SlotAddress {
    Index page = -1;
    Index slot = -1;
};

struct PagedCacheConfig {
    Index layers = 2;
    Index heads = 2;
    Index head_dim = 16;
    Index page_size = 16;
    Index max_pages = std::numeric_limits<Index>::max();
};

class PagedCache {
public:
    explicit PagedCache(const PagedCacheConfig& cfg) : cfg_(cfg) {
        if (cfg.layers <= 0 || cfg.heads <= 0 || cfg.head_dim <= 0 || cfg.page_size <= 0 ||
            cfg.max_pages <= 0)
            throw Error("PagedCache: configuration values must be positive");
        tables_.resize(static_cast<std::size_t>(cfg.layers * cfg.heads));
    }

    const PagedCacheConfig& config() const { return cfg_; }

    SlotAddress append(Index layer, Index head, const CacheEntry& e) {
        Table& tb = table(layer, head);
        require_shape(e.key.size() == cfg_.head_dim && e.value.size() == cfg_.head_dim,
                      "PagedCache::append: entry width mismatch");
        if (e.birth <= tb.last_birth)
            throw Error("PagedCache::append: births must increase within a head");
        if (tb.pages.empty() || pages_[static_cast<std::size_t>(tb.pages.back())].used == cfg_.page_size)
            tb.pages.push_back(allocate(owner_id(layer, head)));
        const Index pid = tb.pages.back();
        Page& pg = pages_[static_cast<std::size_t>(pid)];
        const Index s = pg.used++;
        pg.keys.row(s) = e.key.transpose();
        pg.values.row(s) = e.value.transpose();
        pg.births[static_cast<std::size_t>(s)] = e.birth;
        pg.betas[static_cast<std::size_t>(s)] = e.beta;
        pg.occupied[static_cast<std::size_t>(s)] = 1;
        ++pg.live;
        ++tb.length;
        tb.last_birth = e.birth;
        const SlotAddress addr{pid, s};
        tb.where.emplace(e.birth, addr);
        return addr;
    }

    void evict(Index layer, Index head, const std::vector<Index>& births) {
        Table& tb = table(layer, head);
        std::vector<Index> sorted = births;
        std::sort(sorted.begin(), sorted.end());
        if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
            throw Error("PagedCache::evict: duplicate birth index");
        for (Index b : births)
            if (tb.where.find(b) == tb.where.end())
                throw Error("PagedCache::evict: birth index not present in this head");
        for (Index b : births) {
            auto it = tb.where.find(b);
            const SlotAddress a = it->second;
            tb.where.erase(it);
            Page& pg = pages_[static_cast<std::size_t>(a.page)];
            pg.occupied[static_cast<std::size_t>(a.slot)] = 0;
            --pg.live;
            --tb.length;
            if (pg.live == 0) {
                tb.pages.erase(std::find(tb.pages.begin(), tb.pages.end(), a.page));
                release(a.page);
            }
        }
    }

    /// Live entries of one head in logical (birth) order.
    HeadCache gather(Index layer, Index head) const {
        const Table& tb = table(layer, head);
        HeadCache hc;
        hc.keys.resize(tb.length, cfg_.head_dim);
        hc.values.resize(tb.length, cfg_.head_dim);
        hc.births.reserve(static_cast<std::size_t>(tb.length));
        hc.betas.reserve(static_cast<std::size_t>(tb.length));
        Index r = 0;
        for (Index pid : tb.pages) {
            const Page& pg = pages_[static_cast<std::size_t>(pid)];
            for (Index s = 0; s < pg.used; ++s) {
                if (!pg.occupied[static_cast<std::size_t>(s)]) continue;
                hc.keys.row(r) = pg.keys.row(s);
                hc.values.row(r) = pg.values.row(s);
                hc.births.push_back(pg.births[static_cast<std::size_t>(s)]);
                hc.betas.push_back(pg.betas[static_cast<std::size_t>(s)]);
                ++r;
            }
        }
        return hc;
    }

    /// (birth, beta) pairs of one head without copying vectors.
    std::vector<std::pair<Index, double>> entries(Index layer, Index head) const {
        const Table& tb = table(layer, head);
        std::vector<std::pair<Index, double>> out;
        out.reserve(static_cast<std::size_t>(tb.length));
        for (Index pid : tb.pages) {
            const Page& pg = pages_[static_cast<std::size_t>(pid)];
            for (Index s = 0; s < pg.used; ++s)
                if (pg.occupied[static_cast<std::size_t>(s)])
                    out.emplace_back(pg.births[static_cast<std::size_t>(s)],
                                     pg.betas[static_cast<std::size_t>(s)]);
        }
        return out;
    }

    void compact(Index layer, Index head) {
        Table& tb = table(layer, head);
        const Index needed = (tb.length + cfg_.page_size - 1) / cfg_.page_size;
        if (static_cast<Index>(tb.pages.size()) == needed && !has_holes(tb)) return;
        const HeadCache live = gather(layer, head);
        for (auto it = tb.pages.rbegin(); it != tb.pages.rend(); ++it) release(*it);
        tb.pages.clear();
        tb.where.clear();
        tb.length = 0;
        const Index keep_last = tb.last_birth;
        tb.last_birth = std::numeric_limits<Index>::min();
        for (Index j = 0; j < live.size(); ++j)
            append(layer, head,
                   CacheEntry{live.keys.row(j).transpose(), live.values.row(j).transpose(),
                              live.births[static_cast<std::size_t>(j)],
                              live.betas[static_cast<std::size_t>(j)]});
        tb.last_birth = keep_last;
    }

    Index logical_length(Index layer, Index head) const { return table(layer, head).length; }

    Index total_length() const {
        Index n = 0;
        for (const auto& tb : tables_) n += tb.length;
        return n;
    }

    Index head_page_count(Index layer, Index head) const {
        return static_cast<Index>(table(layer, head).pages.size());
    }

    const std::vector<Index>& block_table(Index layer, Index head) const {
        return table(layer, head).pages;
    }

    /// Pages currently owned by some block table.
    Index pages_in_use() const { return static_cast<Index>(pages_.size() - free_.size()); }
    Index pages_allocated() const { return static_cast<Index>(pages_.size()); }

    Index page_occupancy(Index page) const { return pages_.at(static_cast<std::size_t>(page)).live; }

    /// Throws if accounting or ownership invariants are broken.
    void check_invariants() const {
        std::vector<int> seen(pages_.size(), 0);
        Index occupied = 0;
        for (std::size_t t = 0; t < tables_.size(); ++t) {
            const Table& tb = tables_[t];
            Index live = 0;
            for (Index pid : tb.pages) {
                auto& cnt = seen.at(static_cast<std::size_t>(pid));
                if (++cnt > 1) throw Error("PagedCache: page referenced twice");
                const Page& pg = pages_[static_cast<std::size_t>(pid)];
                if (pg.owner != static_cast<Index>(t)) throw Error("PagedCache: page owner mismatch");
                if (pg.live <= 0 || pg.live > cfg_.page_size)
                    throw Error("PagedCache: page occupancy out of range");
                live += pg.live;
            }
            if (live != tb.length) throw Error("PagedCache: logical length != occupied slots");
            if (static_cast<Index>(tb.where.size()) != tb.length)
                throw Error("PagedCache: index map out of sync");
            occupied += live;
        }
        if (occupied != total_length()) throw Error("PagedCache: global accounting mismatch");
    }

    /// Block tables and per-page occupancy as JSON, for inspection.
    nlohmann::json snapshot() const {
        nlohmann::json j;
        j["page_size"] = cfg_.page_size;
        j["pages_allocated"] = pages_allocated();
        j["pages_in_use"] = pages_in_use();
        j["free_list"] = free_;
        auto& heads = j["heads"] = nlohmann::json::array();
        for (Index l = 0; l < cfg_.layers; ++l)
            for (Index h = 0; h < cfg_.heads; ++h) {
                const Table& tb = table(l, h);
                nlohmann::json hj;
                hj["layer"] = l;
                hj["head"] = h;
                hj["logical_length"] = tb.length;
                hj["block_table"] = tb.pages;
                std::vector<Index> occ;
                for (Index pid : tb.pages) occ.push_back(pages_[static_cast<std::size_t>(pid)].live);
                hj["occupancy"] = occ;
                heads.push_back(std::move(hj));
            }
        return j;
    }

private:
    struct Page {
        Matrix keys;
        Matrix values;
        std::vector<Index> births;
        std::vector<double> betas;
        std::vector<char> occupied;
        Index used = 0;  // slots ever written since allocation
        Index live = 0;
        Index owner = -1;
    };

    struct Table {
        std::vector<Index> pages;
        Index length = 0;
        Index last_birth = std::numeric_limits<Index>::min();
        std::unordered_map<Index, SlotAddress> where;
    };

    Index owner_id(Index layer, Index head) const { return layer * cfg_.heads + head; }

    Table& table(Index layer, Index head) {
        require_shape(layer >= 0 && layer < cfg_.layers && head >= 0 && head < cfg_.heads,
                      "PagedCache: layer/head out of range");
        return tables_[static_cast<std::size_t>(owner_id(layer, head))];
    }
    const Table& table(Index layer, Index head) const {
        return const_cast<PagedCache*>(this)->table(layer, head);
    }

    bool has_holes(const Table& tb) const {
        Index used = 0;
        for (Index pid : tb.pages) used += pages_[static_cast<std::size_t>(pid)].used;
        return used != tb.length;
    }

    Index allocate(Index owner) {
        Index pid;
        if (!free_.empty()) {
            pid = free_.back();
            free_.pop_back();
        } else {
            if (static_cast<Index>(pages_.size()) >= cfg_.max_pages)
                throw CapacityError("PagedCache: page allocator exhausted");
            pid = static_cast<Index>(pages_.size());
            pages_.emplace_back();
        }
        Page& pg = pages_[static_cast<std::size_t>(pid)];
        const auto ps = static_cast<std::size_t>(cfg_.page_size);
        pg.keys = Matrix::Zero(cfg_.page_size, cfg_.head_dim);
        pg.values = Matrix::Zero(cfg_.page_size, cfg_.head_dim);
        pg.births.assign(ps, -1);
        pg.betas.assign(ps, 0.0);
        pg.occupied.assign(ps, 0);
        pg.used = 0;
        pg.live = 0;
        pg.owner = owner;
        return pid;
    }

    void release(Index pid) {
        Page& pg = pages_[static_cast<std::size_t>(pid)];
        pg.owner = -1;
        pg.used = 0;
        pg.live = 0;
        free_.push_back(pid);
    }

    PagedCacheConfig cfg_;
    std::vector<Page> pages_;
    std::vector<Index> free_;
    std::vector<Table> tables_;
};

}  // namespace retkv
