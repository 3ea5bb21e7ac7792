import type {
  CanvasObject, CanvasState, PixelBox, SearchMode, SearchRequestBody,
} from './types.js'

export const MAX_OBJECTS = 6
export const MIN_BOX_PX = 8

export type Direction = 'up' | 'down' | 'left' | 'right'

const DELTAS: Record<Direction, [number, number]> = {
  up: [0, -1],
  down: [0, 1],
  left: [-1, 0],
  right: [1, 0],
}

export function emptyState(width: number, height: number): CanvasState {
  return {
    canvas: { width, height },
    objects: [],
    selection: null,
    k: 10,
    mode: 'cal',
    results: null,
    error: null,
  }
}

/** Keep the box inside the canvas without shrinking it below the minimum. */
export function clampBox(box: PixelBox, canvas: { width: number; height: number }): PixelBox {
  const w = Math.min(Math.max(box.w, MIN_BOX_PX), canvas.width)
  const h = Math.min(Math.max(box.h, MIN_BOX_PX), canvas.height)
  const x = Math.min(Math.max(box.x, 0), canvas.width - w)
  const y = Math.min(Math.max(box.y, 0), canvas.height - h)
  return { x, y, w, h }
}

export function addObject(state: CanvasState, category: number, box: PixelBox): CanvasState {
  if (state.objects.length >= MAX_OBJECTS) {
    return { ...state, error: `at most ${MAX_OBJECTS} objects per query` }
  }
  const objects = [...state.objects, { category, box: clampBox(box, state.canvas) }]
  return { ...state, objects, selection: objects.length - 1, error: null }
}

export function removeObject(state: CanvasState, index: number): CanvasState {
  const objects = state.objects.filter((_, i) => i !== index)
  return { ...state, objects, selection: null, error: null }
}

export function selectObject(state: CanvasState, index: number | null): CanvasState {
  if (index !== null && (index < 0 || index >= state.objects.length)) return state
  return { ...state, selection: index }
}

function withBox(state: CanvasState, index: number, box: PixelBox): CanvasState {
  const objects = state.objects.map((obj, i): CanvasObject =>
    i === index ? { ...obj, box } : obj)
  return { ...state, objects, error: null }
}

export function moveObject(state: CanvasState, index: number, dx: number, dy: number): CanvasState {
  const obj = state.objects[index]
  if (!obj) return state
  const moved = { ...obj.box, x: obj.box.x + dx, y: obj.box.y + dy }
  return withBox(state, index, clampBox(moved, state.canvas))
}

export function resizeObject(state: CanvasState, index: number, dw: number, dh: number): CanvasState {
  const obj = state.objects[index]
  if (!obj) return state
  const grown = { ...obj.box, w: obj.box.w + dw, h: obj.box.h + dh }
  return withBox(state, index, clampBox(grown, state.canvas))
}

export function relabelObject(state: CanvasState, index: number, category: number): CanvasState {
  const obj = state.objects[index]
  if (!obj) return state
  const objects = state.objects.map((o, i): CanvasObject =>
    i === index ? { ...o, category } : o)
  return { ...state, objects, error: null }
}

/** Translate the selected box by one step; clamps at the canvas edge. */
export function nudgeObject(state: CanvasState, direction: Direction, step = 1): CanvasState {
  if (state.selection === null) return state
  const [dx, dy] = DELTAS[direction]
  return moveObject(state, state.selection, dx * step, dy * step)
}

export function opposite(direction: Direction): Direction {
  return { up: 'down', down: 'up', left: 'right', right: 'left' }[direction] as Direction
}

export function setMode(state: CanvasState, mode: SearchMode): CanvasState {
  return { ...state, mode }
}

export function setK(state: CanvasState, k: number): CanvasState {
  return { ...state, k: Math.max(1, Math.round(k)) }
}

export function canSearch(state: CanvasState): boolean {
  return state.objects.length > 0
}

export function normalizeBox(box: PixelBox, canvas: { width: number; height: number }): [number, number, number, number] {
  return [box.x / canvas.width, box.y / canvas.height,
          box.w / canvas.width, box.h / canvas.height]
}

export function denormalizeBox(bbox: [number, number, number, number],
                               canvas: { width: number; height: number }): PixelBox {
  return {
    x: bbox[0] * canvas.width,
    y: bbox[1] * canvas.height,
    w: bbox[2] * canvas.width,
    h: bbox[3] * canvas.height,
  }
}

/** The exact JSON body POSTed to /search. */
export function buildSearchRequest(state: CanvasState): SearchRequestBody {
  if (!canSearch(state)) throw new Error('place at least one object first')
  return {
    objects: state.objects.map(obj => ({
      category: obj.category,
      bbox: normalizeBox(obj.box, state.canvas),
    })),
    k: state.k,
    mode: state.mode,
  }
}
