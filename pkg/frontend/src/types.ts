/** Pixel-space box: top-left corner plus extents. */
export interface PixelBox {
  x: number
  y: number
  w: number
  h: number
}

export interface CanvasObject {
  category: number
  box: PixelBox
}

export type SearchMode = 'cal' | 'textual'

export interface ResultTile {
  id: string
  score: number
  rank: number
  thumbnail: string
}

export interface CanvasState {
  canvas: { width: number; height: number }
  objects: CanvasObject[]
  selection: number | null
  k: number
  mode: SearchMode
  results: ResultTile[] | null
  error: string | null
}

/** Wire format of POST /search; bbox entries are normalized [x,y,w,h]. */
export interface SearchRequestBody {
  objects: { category: number; bbox: [number, number, number, number] }[]
  k: number
  mode: SearchMode
}

export interface SearchResponse {
  results: ResultTile[]
  timingMs: number
}

export interface Category {
  id: number
  name: string
}
