import { SearchClient, ServiceUnreachable } from './api.js'
import {
  addObject, buildSearchRequest, canSearch, emptyState, moveObject,
  nudgeObject, removeObject, resizeObject, selectObject, setK, setMode,
  type Direction,
} from './state.js'
import { renderBanner, renderBoxes, renderPalette, renderResults } from './render.js'
import type { CanvasState, Category, SearchMode } from './types.js'

const CANVAS_W = 480
const CANVAS_H = 360
const NUDGE_STEP = 4

const client = new SearchClient(
  (window as unknown as { SERVICE_URL?: string }).SERVICE_URL ?? '')

let state: CanvasState = emptyState(CANVAS_W, CANVAS_H)
let categories: Category[] = []
let activeCategory = 0

const el = (id: string) => document.getElementById(id) as HTMLElement

function redraw(): void {
  el('boxes').innerHTML = renderBoxes(state, categories)
  el('banner').innerHTML = renderBanner(state.error)
  el('palette').innerHTML = renderPalette(categories, activeCategory)
  el('results').innerHTML = state.results
    ? renderResults(state.results, p => client.thumbnailUrl(p))
    : ''
  ;(el('search') as HTMLButtonElement).disabled = !canSearch(state)
}

async function submit(): Promise<void> {
  if (!canSearch(state)) return
  try {
    const res = await client.search(buildSearchRequest(state))
    state = { ...state, results: res.results, error: null }
  } catch (err) {
    if (err instanceof Error && err.name === 'AbortError') return
    const msg = err instanceof ServiceUnreachable
      ? err.message
      : `search failed: ${err instanceof Error ? err.message : String(err)}`
    state = { ...state, error: msg }
  }
  redraw()
}

function wireCanvas(): void {
  const surface = el('canvas')
  let drag: { index: number; resize: boolean; lastX: number; lastY: number } | null = null

  surface.addEventListener('pointerdown', event => {
    const target = event.target as HTMLElement
    const index = target.dataset.index !== undefined ? Number(target.dataset.index) : null
    if (index !== null) {
      state = selectObject(state, index)
      drag = { index, resize: target.classList.contains('handle'),
               lastX: event.clientX, lastY: event.clientY }
      surface.setPointerCapture(event.pointerId)
    } else {
      const rect = surface.getBoundingClientRect()
      state = addObject(state, activeCategory, {
        x: event.clientX - rect.left - 40,
        y: event.clientY - rect.top - 30,
        w: 80, h: 60,
      })
    }
    redraw()
  })
  surface.addEventListener('pointermove', event => {
    if (!drag) return
    const dx = event.clientX - drag.lastX
    const dy = event.clientY - drag.lastY
    drag.lastX = event.clientX
    drag.lastY = event.clientY
    state = drag.resize
      ? resizeObject(state, drag.index, dx, dy)
      : moveObject(state, drag.index, dx, dy)
    redraw()
  })
  surface.addEventListener('pointerup', () => { drag = null })

  document.addEventListener('keydown', event => {
    const keys: Record<string, Direction> = {
      ArrowUp: 'up', ArrowDown: 'down', ArrowLeft: 'left', ArrowRight: 'right',
    }
    const direction = keys[event.key]
    if (direction && state.selection !== null) {
      event.preventDefault()
      state = nudgeObject(state, direction, NUDGE_STEP)
      redraw()
    } else if ((event.key === 'Delete' || event.key === 'Backspace')
               && state.selection !== null) {
      state = removeObject(state, state.selection)
      redraw()
    }
  })
}

function wireControls(): void {
  el('palette').addEventListener('click', event => {
    const btn = (event.target as HTMLElement).closest('button.cat') as HTMLElement | null
    if (!btn) return
    activeCategory = Number(btn.dataset.category)
    if (state.selection !== null) {
      state = { ...state, objects: state.objects.map((o, i) =>
        i === state.selection ? { ...o, category: activeCategory } : o) }
    }
    redraw()
  })
  el('search').addEventListener('click', () => { void submit() })
  el('clear').addEventListener('click', () => {
    state = emptyState(CANVAS_W, CANVAS_H)
    redraw()
  })
  ;(el('k') as HTMLInputElement).addEventListener('change', event => {
    state = setK(state, Number((event.target as HTMLInputElement).value))
  })
  ;(el('mode') as HTMLSelectElement).addEventListener('change', event => {
    state = setMode(state, (event.target as HTMLSelectElement).value as SearchMode)
  })
}

async function boot(): Promise<void> {
  wireCanvas()
  wireControls()
  try {
    categories = await client.categories()
    activeCategory = categories[0]?.id ?? 0
  } catch {
    state = { ...state, error: 'service unreachable; category palette unavailable' }
  }
  redraw()
}

void boot()
