import type { Category, SearchRequestBody, SearchResponse } from './types.js'

export class ServiceUnreachable extends Error {}

type FetchFn = typeof fetch

/**
 * Thin client for the search service. Only one search is in flight at a
 * time: a newer submission aborts the previous request.
 */
export class SearchClient {
  private readonly baseUrl: string
  private readonly fetchFn: FetchFn
  private inflight: AbortController | null = null

  constructor(baseUrl: string, fetchFn: FetchFn = fetch) {
    this.baseUrl = baseUrl.replace(/\/$/, '')
    this.fetchFn = fetchFn
  }

  async categories(): Promise<Category[]> {
    const res = await this.request('/categories', { method: 'GET' })
    return res.json() as Promise<Category[]>
  }

  async search(body: SearchRequestBody): Promise<SearchResponse> {
    this.inflight?.abort()
    const ctrl = new AbortController()
    this.inflight = ctrl
    try {
      const res = await this.request('/search', {
        method: 'POST',
        headers: { 'content-type': 'application/json' },
        body: JSON.stringify(body),
        signal: ctrl.signal,
      })
      return await (res.json() as Promise<SearchResponse>)
    } finally {
      if (this.inflight === ctrl) this.inflight = null
    }
  }

  thumbnailUrl(path: string): string {
    return this.baseUrl + path
  }

  private async request(path: string, init: RequestInit): Promise<Response> {
    let res: Response
    try {
      res = await this.fetchFn(this.baseUrl + path, init)
    } catch (err) {
      if (err instanceof Error && err.name === 'AbortError') throw err
      throw new ServiceUnreachable(`service unreachable at ${this.baseUrl}`)
    }
    if (!res.ok) {
      const detail = await res.text().catch(() => '')
      throw new Error(`${path} failed (${res.status}): ${detail}`)
    }
    return res
  }
}
